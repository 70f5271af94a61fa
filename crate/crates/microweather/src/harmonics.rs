//! Real spherical-harmonic basis used by the location encoder.
//!
//! Fully normalized, no Condon-Shortley phase. Evaluated with the stable
//! normalized associated-Legendre recurrences so high degrees neither
//! overflow nor lose orthonormality.

/// Basis length for a given maximum degree.
pub fn basis_len(degree: usize) -> usize {
    (degree + 1) * (degree + 1)
}

/// Evaluate every real spherical harmonic up to `degree` at a geographic
/// point. Output layout: index l*l + l + m for m in [-l, l].
pub fn sh_basis(lat_deg: f64, lon_deg: f64, degree: usize) -> Vec<f64> {
    let theta_cos = lat_deg.to_radians().sin(); // cos(colatitude)
    let theta_sin = lat_deg.to_radians().cos(); // sin(colatitude), >= 0
    let phi = lon_deg.to_radians();
    let lmax = degree;

    // p[l][m] = fully normalized associated Legendre at cos(colat).
    let mut p = vec![vec![0.0f64; lmax + 1]; lmax + 1];
    p[0][0] = (1.0 / (4.0 * std::f64::consts::PI)).sqrt();
    for m in 1..=lmax {
        p[m][m] = theta_sin * ((2 * m + 1) as f64 / (2 * m) as f64).sqrt() * p[m - 1][m - 1];
    }
    for m in 0..lmax {
        p[m + 1][m] = ((2 * m + 3) as f64).sqrt() * theta_cos * p[m][m];
    }
    for m in 0..=lmax {
        for l in (m + 2)..=lmax {
            let a = ((4 * l * l - 1) as f64 / (l * l - m * m) as f64).sqrt();
            let b = (((l - 1) * (l - 1) - m * m) as f64 / (4 * (l - 1) * (l - 1) - 1) as f64).sqrt();
            p[l][m] = a * (theta_cos * p[l - 1][m] - b * p[l - 2][m]);
        }
    }

    let sqrt2 = std::f64::consts::SQRT_2;
    let mut out = vec![0.0f64; basis_len(degree)];
    for l in 0..=lmax {
        let base = l * l + l;
        out[base] = p[l][0];
        for m in 1..=l {
            let (s, c) = ((m as f64) * phi).sin_cos();
            out[base + m] = sqrt2 * p[l][m] * c;
            out[base - m] = sqrt2 * p[l][m] * s;
        }
    }
    out
}
