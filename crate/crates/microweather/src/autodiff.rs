//! Tape-based reverse-mode differentiation over [`Mat`].
//!
//! Every forward pass builds a fresh tape; `backward` walks it once in
//! reverse. All math is f64 so finite-difference checks can use tight
//! tolerances. Parameters are registered by name: binding the same name
//! twice returns the same node, so shared weights accumulate gradients
//! in one place.

use std::collections::HashMap;

use crate::tensor::Mat;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

enum Op {
    Leaf,
    Param,
    MatMul(usize, usize),
    MatMulBt(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    /// Broadcast a 1 x d row onto every row of an n x d matrix.
    AddRow(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    Relu(usize),
    Sin(usize),
    Transpose(usize),
    ConcatCols(Vec<usize>),
    ConcatRows(Vec<usize>),
    SliceCols(usize, usize, usize),
    RowMean(usize),
    SumAll(usize),
    /// Row-wise softmax; `false` mask entries are exact zeros in the output
    /// and receive no gradient.
    SoftmaxRowsMasked(usize, Vec<bool>),
    DepthwiseConv3x3 { input: usize, kernels: usize, h: usize, w: usize },
    /// Learned transposed-conv upsampling: every input pixel spreads into an
    /// f x f block weighted by that band's kernel.
    Upsample { input: usize, kernels: usize, h: usize, w: usize, factor: usize },
}

pub struct Tape {
    ops: Vec<Op>,
    values: Vec<Mat>,
    grads: Vec<Option<Mat>>,
    param_lookup: HashMap<String, usize>,
    param_order: Vec<(String, usize)>,
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            ops: Vec::new(),
            values: Vec::new(),
            grads: Vec::new(),
            param_lookup: HashMap::new(),
            param_order: Vec::new(),
        }
    }

    fn push(&mut self, op: Op, value: Mat) -> Var {
        self.ops.push(op);
        self.values.push(value);
        self.grads.push(None);
        Var(self.ops.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Mat {
        &self.values[v.0]
    }

    pub fn grad(&self, v: Var) -> Mat {
        match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => {
                let m = &self.values[v.0];
                Mat::zeros(m.rows, m.cols)
            }
        }
    }

    pub fn leaf(&mut self, value: Mat) -> Var {
        self.push(Op::Leaf, value)
    }

    /// Register (or re-bind) a named parameter. Same name, same node.
    pub fn param(&mut self, name: &str, value: &Mat) -> Var {
        if let Some(&idx) = self.param_lookup.get(name) {
            return Var(idx);
        }
        let v = self.push(Op::Param, value.clone());
        self.param_lookup.insert(name.to_string(), v.0);
        self.param_order.push((name.to_string(), v.0));
        v
    }

    /// Parameter gradients in registration order (zeros if untouched).
    pub fn param_grads(&self) -> Vec<(String, Mat)> {
        self.param_order
            .iter()
            .map(|(name, idx)| {
                let g = match &self.grads[*idx] {
                    Some(g) => g.clone(),
                    None => {
                        let m = &self.values[*idx];
                        Mat::zeros(m.rows, m.cols)
                    }
                };
                (name.clone(), g)
            })
            .collect()
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.values[a.0].matmul(&self.values[b.0]);
        self.push(Op::MatMul(a.0, b.0), v)
    }

    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Var {
        let v = self.values[a.0].matmul_bt(&self.values[b.0]);
        self.push(Op::MatMulBt(a.0, b.0), v)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.values[a.0].add(&self.values[b.0]);
        self.push(Op::Add(a.0, b.0), v)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.values[a.0].sub(&self.values[b.0]);
        self.push(Op::Sub(a.0, b.0), v)
    }

    pub fn add_row(&mut self, m: Var, row: Var) -> Var {
        let (mm, rr) = (&self.values[m.0], &self.values[row.0]);
        assert_eq!(rr.rows, 1);
        assert_eq!(mm.cols, rr.cols);
        let mut out = mm.clone();
        for r in 0..out.rows {
            for c in 0..out.cols {
                out.data[r * out.cols + c] += rr.data[c];
            }
        }
        self.push(Op::AddRow(m.0, row.0), out)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.values[a.0].zip(&self.values[b.0], |x, y| x * y);
        self.push(Op::Mul(a.0, b.0), v)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let v = self.values[a.0].scale(s);
        self.push(Op::Scale(a.0, s), v)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.values[a.0].map(|x| if x > 0.0 { x } else { 0.0 });
        self.push(Op::Relu(a.0), v)
    }

    pub fn sin(&mut self, a: Var) -> Var {
        let v = self.values[a.0].map(f64::sin);
        self.push(Op::Sin(a.0), v)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let v = self.values[a.0].transpose();
        self.push(Op::Transpose(a.0), v)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let mut out = self.values[parts[0].0].clone();
        for p in &parts[1..] {
            out = out.hcat(&self.values[p.0]);
        }
        self.push(Op::ConcatCols(parts.iter().map(|v| v.0).collect()), out)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let mut out = self.values[parts[0].0].clone();
        for p in &parts[1..] {
            out = out.vcat(&self.values[p.0]);
        }
        self.push(Op::ConcatRows(parts.iter().map(|v| v.0).collect()), out)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Var {
        let m = &self.values[a.0];
        assert!(start < end && end <= m.cols);
        let mut out = Mat::zeros(m.rows, end - start);
        for r in 0..m.rows {
            out.data[r * out.cols..(r + 1) * out.cols]
                .copy_from_slice(&m.data[r * m.cols + start..r * m.cols + end]);
        }
        self.push(Op::SliceCols(a.0, start, end), out)
    }

    /// n x d -> n x 1 of row means.
    pub fn row_mean(&mut self, a: Var) -> Var {
        let m = &self.values[a.0];
        let inv = 1.0 / m.cols as f64;
        let mut out = Mat::zeros(m.rows, 1);
        for r in 0..m.rows {
            out.data[r] = m.row_slice(r).iter().sum::<f64>() * inv;
        }
        self.push(Op::RowMean(a.0), out)
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s = self.values[a.0].sum();
        self.push(Op::SumAll(a.0), Mat::from_vec(1, 1, vec![s]))
    }

    /// Row-wise masked softmax. `mask` is row-major, same shape as `a`;
    /// `false` entries come out exactly 0. Every row must keep at least one
    /// allowed entry; callers validate that before building the tape.
    pub fn softmax_rows_masked(&mut self, a: Var, mask: Vec<bool>) -> Var {
        let m = &self.values[a.0];
        assert_eq!(mask.len(), m.rows * m.cols);
        let mut out = Mat::zeros(m.rows, m.cols);
        for r in 0..m.rows {
            let row = m.row_slice(r);
            let mrow = &mask[r * m.cols..(r + 1) * m.cols];
            assert!(mrow.iter().any(|&k| k), "softmax row {} fully masked", r);
            let mut hi = f64::NEG_INFINITY;
            for (x, &keep) in row.iter().zip(mrow) {
                if keep && *x > hi {
                    hi = *x;
                }
            }
            if !hi.is_finite() {
                // Non-finite scores (diverged parameters): poison the row
                // so the loss reports divergence instead of panicking.
                for c in 0..m.cols {
                    if mrow[c] {
                        out.data[r * m.cols + c] = f64::NAN;
                    }
                }
                continue;
            }
            let mut denom = 0.0;
            for (c, (&x, &keep)) in row.iter().zip(mrow).enumerate() {
                if keep {
                    let e = (x - hi).exp();
                    out.data[r * m.cols + c] = e;
                    denom += e;
                }
            }
            for c in 0..m.cols {
                if mrow[c] {
                    out.data[r * m.cols + c] /= denom;
                }
            }
        }
        self.push(Op::SoftmaxRowsMasked(a.0, mask), out)
    }

    /// Per-band 3x3 convolution with zero padding. `input` is B x (h*w),
    /// `kernels` is B x 9, output keeps the input shape.
    pub fn depthwise_conv3x3(&mut self, input: Var, kernels: Var, h: usize, w: usize) -> Var {
        let x = &self.values[input.0];
        let k = &self.values[kernels.0];
        assert_eq!(x.cols, h * w);
        assert_eq!((k.rows, k.cols), (x.rows, 9));
        let mut out = Mat::zeros(x.rows, x.cols);
        for b in 0..x.rows {
            let krow = k.row_slice(b);
            for i in 0..h {
                for j in 0..w {
                    let mut acc = 0.0;
                    for di in 0..3usize {
                        let ii = i as isize + di as isize - 1;
                        if ii < 0 || ii >= h as isize {
                            continue;
                        }
                        for dj in 0..3usize {
                            let jj = j as isize + dj as isize - 1;
                            if jj < 0 || jj >= w as isize {
                                continue;
                            }
                            acc += x.data[b * x.cols + ii as usize * w + jj as usize]
                                * krow[di * 3 + dj];
                        }
                    }
                    out.data[b * x.cols + i * w + j] = acc;
                }
            }
        }
        self.push(Op::DepthwiseConv3x3 { input: input.0, kernels: kernels.0, h, w }, out)
    }

    /// Learned upsampling by `factor`: input B x (h*w), kernels B x factor^2,
    /// output B x (h*factor * w*factor).
    pub fn upsample(&mut self, input: Var, kernels: Var, h: usize, w: usize, factor: usize) -> Var {
        let x = &self.values[input.0];
        let k = &self.values[kernels.0];
        assert_eq!(x.cols, h * w);
        assert_eq!((k.rows, k.cols), (x.rows, factor * factor));
        let (oh, ow) = (h * factor, w * factor);
        let mut out = Mat::zeros(x.rows, oh * ow);
        for b in 0..x.rows {
            let krow = k.row_slice(b);
            for i in 0..h {
                for j in 0..w {
                    let v = x.data[b * x.cols + i * w + j];
                    for di in 0..factor {
                        for dj in 0..factor {
                            out.data[b * out.cols + (i * factor + di) * ow + (j * factor + dj)] =
                                v * krow[di * factor + dj];
                        }
                    }
                }
            }
        }
        self.push(Op::Upsample { input: input.0, kernels: kernels.0, h, w, factor }, out)
    }

    fn accumulate(&mut self, idx: usize, g: Mat) {
        match &mut self.grads[idx] {
            Some(existing) => {
                debug_assert_eq!((existing.rows, existing.cols), (g.rows, g.cols));
                for (e, v) in existing.data.iter_mut().zip(&g.data) {
                    *e += v;
                }
            }
            slot => *slot = Some(g),
        }
    }

    /// Backpropagate from `output`, seeding its gradient with `seed`.
    pub fn backward_with_seed(&mut self, output: Var, seed: Mat) {
        {
            let out = &self.values[output.0];
            assert_eq!((seed.rows, seed.cols), (out.rows, out.cols));
        }
        for g in self.grads.iter_mut() {
            *g = None;
        }
        self.grads[output.0] = Some(seed);

        for idx in (0..self.ops.len()).rev() {
            let g = match self.grads[idx].take() {
                Some(g) => g,
                None => continue,
            };
            // Put it back so callers can read intermediate grads.
            self.grads[idx] = Some(g.clone());
            match &self.ops[idx] {
                Op::Leaf | Op::Param => {}
                Op::MatMul(a, b) => {
                    let (a, b) = (*a, *b);
                    let ga = g.matmul_bt(&self.values[b]);
                    let gb = self.values[a].matmul_at(&g);
                    self.accumulate(a, ga);
                    self.accumulate(b, gb);
                }
                Op::MatMulBt(a, b) => {
                    let (a, b) = (*a, *b);
                    let ga = g.matmul(&self.values[b]);
                    let gb = g.matmul_at(&self.values[a]);
                    self.accumulate(a, ga);
                    self.accumulate(b, gb);
                }
                Op::Add(a, b) => {
                    let (a, b) = (*a, *b);
                    self.accumulate(a, g.clone());
                    self.accumulate(b, g);
                }
                Op::Sub(a, b) => {
                    let (a, b) = (*a, *b);
                    self.accumulate(a, g.clone());
                    self.accumulate(b, g.scale(-1.0));
                }
                Op::AddRow(m, row) => {
                    let (m, row) = (*m, *row);
                    let mut grow = Mat::zeros(1, g.cols);
                    for r in 0..g.rows {
                        for c in 0..g.cols {
                            grow.data[c] += g.data[r * g.cols + c];
                        }
                    }
                    self.accumulate(m, g);
                    self.accumulate(row, grow);
                }
                Op::Mul(a, b) => {
                    let (a, b) = (*a, *b);
                    let ga = g.zip(&self.values[b], |gi, bi| gi * bi);
                    let gb = g.zip(&self.values[a], |gi, ai| gi * ai);
                    self.accumulate(a, ga);
                    self.accumulate(b, gb);
                }
                Op::Scale(a, s) => {
                    let (a, s) = (*a, *s);
                    self.accumulate(a, g.scale(s));
                }
                Op::Relu(a) => {
                    let a = *a;
                    let ga = g.zip(&self.values[a], |gi, x| if x > 0.0 { gi } else { 0.0 });
                    self.accumulate(a, ga);
                }
                Op::Sin(a) => {
                    let a = *a;
                    let ga = g.zip(&self.values[a], |gi, x| gi * x.cos());
                    self.accumulate(a, ga);
                }
                Op::Transpose(a) => {
                    let a = *a;
                    self.accumulate(a, g.transpose());
                }
                Op::ConcatCols(parts) => {
                    let parts = parts.clone();
                    let mut start = 0;
                    for p in parts {
                        let w = self.values[p].cols;
                        let mut gp = Mat::zeros(g.rows, w);
                        for r in 0..g.rows {
                            gp.data[r * w..(r + 1) * w]
                                .copy_from_slice(&g.data[r * g.cols + start..r * g.cols + start + w]);
                        }
                        self.accumulate(p, gp);
                        start += w;
                    }
                }
                Op::ConcatRows(parts) => {
                    let parts = parts.clone();
                    let mut start = 0;
                    for p in parts {
                        let h = self.values[p].rows;
                        let gp = Mat {
                            rows: h,
                            cols: g.cols,
                            data: g.data[start * g.cols..(start + h) * g.cols].to_vec(),
                        };
                        self.accumulate(p, gp);
                        start += h;
                    }
                }
                Op::SliceCols(a, start, _end) => {
                    let (a, start) = (*a, *start);
                    let src = &self.values[a];
                    let mut ga = Mat::zeros(src.rows, src.cols);
                    for r in 0..g.rows {
                        ga.data[r * src.cols + start..r * src.cols + start + g.cols]
                            .copy_from_slice(&g.data[r * g.cols..(r + 1) * g.cols]);
                    }
                    self.accumulate(a, ga);
                }
                Op::RowMean(a) => {
                    let a = *a;
                    let src = &self.values[a];
                    let inv = 1.0 / src.cols as f64;
                    let mut ga = Mat::zeros(src.rows, src.cols);
                    for r in 0..src.rows {
                        let gr = g.data[r] * inv;
                        for c in 0..src.cols {
                            ga.data[r * src.cols + c] = gr;
                        }
                    }
                    self.accumulate(a, ga);
                }
                Op::SumAll(a) => {
                    let a = *a;
                    let src = &self.values[a];
                    let ga = Mat {
                        rows: src.rows,
                        cols: src.cols,
                        data: vec![g.data[0]; src.rows * src.cols],
                    };
                    self.accumulate(a, ga);
                }
                Op::SoftmaxRowsMasked(a, mask) => {
                    let a = *a;
                    let mask = mask.clone();
                    let p = &self.values[idx];
                    let mut ga = Mat::zeros(p.rows, p.cols);
                    for r in 0..p.rows {
                        let mut dot = 0.0;
                        for c in 0..p.cols {
                            if mask[r * p.cols + c] {
                                dot += p.data[r * p.cols + c] * g.data[r * p.cols + c];
                            }
                        }
                        for c in 0..p.cols {
                            if mask[r * p.cols + c] {
                                let pi = p.data[r * p.cols + c];
                                ga.data[r * p.cols + c] = pi * (g.data[r * p.cols + c] - dot);
                            }
                        }
                    }
                    self.accumulate(a, ga);
                }
                Op::DepthwiseConv3x3 { input, kernels, h, w } => {
                    let (input, kernels, h, w) = (*input, *kernels, *h, *w);
                    let x = self.values[input].clone();
                    let k = self.values[kernels].clone();
                    let mut gx = Mat::zeros(x.rows, x.cols);
                    let mut gk = Mat::zeros(k.rows, k.cols);
                    for b in 0..x.rows {
                        for i in 0..h {
                            for j in 0..w {
                                let go = g.data[b * x.cols + i * w + j];
                                if go == 0.0 {
                                    continue;
                                }
                                for di in 0..3usize {
                                    let ii = i as isize + di as isize - 1;
                                    if ii < 0 || ii >= h as isize {
                                        continue;
                                    }
                                    for dj in 0..3usize {
                                        let jj = j as isize + dj as isize - 1;
                                        if jj < 0 || jj >= w as isize {
                                            continue;
                                        }
                                        let xi = b * x.cols + ii as usize * w + jj as usize;
                                        gx.data[xi] += go * k.data[b * 9 + di * 3 + dj];
                                        gk.data[b * 9 + di * 3 + dj] += go * x.data[xi];
                                    }
                                }
                            }
                        }
                    }
                    self.accumulate(input, gx);
                    self.accumulate(kernels, gk);
                }
                Op::Upsample { input, kernels, h, w, factor } => {
                    let (input, kernels, h, w, f) = (*input, *kernels, *h, *w, *factor);
                    let x = self.values[input].clone();
                    let k = self.values[kernels].clone();
                    let ow = w * f;
                    let mut gx = Mat::zeros(x.rows, x.cols);
                    let mut gk = Mat::zeros(k.rows, k.cols);
                    for b in 0..x.rows {
                        for i in 0..h {
                            for j in 0..w {
                                let xv = x.data[b * x.cols + i * w + j];
                                let mut acc = 0.0;
                                for di in 0..f {
                                    for dj in 0..f {
                                        let go = g.data
                                            [b * g.cols + (i * f + di) * ow + (j * f + dj)];
                                        acc += go * k.data[b * k.cols + di * f + dj];
                                        gk.data[b * k.cols + di * f + dj] += go * xv;
                                    }
                                }
                                gx.data[b * x.cols + i * w + j] = acc;
                            }
                        }
                    }
                    self.accumulate(input, gx);
                    self.accumulate(kernels, gk);
                }
            }
        }
    }

    /// Backward from a scalar (1x1) output with seed 1.
    pub fn backward(&mut self, output: Var) {
        assert_eq!((self.value(output).rows, self.value(output).cols), (1, 1), "backward() needs a scalar output");
        self.backward_with_seed(output, Mat::from_vec(1, 1, vec![1.0]));
    }
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_mat(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Mat {
        Mat::from_vec(rows, cols, (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect())
    }

    /// Central-difference check of d(scalar output)/d(each param entry).
    fn check_grads(build: impl Fn(&mut Tape, &HashMap<String, Mat>) -> Var, params: HashMap<String, Mat>, tol: f64) {
        let mut tape = Tape::new();
        let out = build(&mut tape, &params);
        tape.backward(out);
        let analytic: HashMap<String, Mat> = tape.param_grads().into_iter().collect();

        let eps = 1e-5;
        for (name, base) in &params {
            let g = &analytic[name];
            for i in 0..base.data.len() {
                let mut plus = params.clone();
                plus.get_mut(name).unwrap().data[i] += eps;
                let mut minus = params.clone();
                minus.get_mut(name).unwrap().data[i] -= eps;

                let mut tp = Tape::new();
                let op = build(&mut tp, &plus);
                let fp = tp.value(op).data[0];
                let mut tm = Tape::new();
                let om = build(&mut tm, &minus);
                let fm = tm.value(om).data[0];

                let numeric = (fp - fm) / (2.0 * eps);
                let denom = numeric.abs().max(g.data[i].abs()).max(1e-8);
                let rel = (numeric - g.data[i]).abs() / denom;
                assert!(
                    rel < tol,
                    "{}[{}]: analytic {} vs numeric {} (rel {})",
                    name, i, g.data[i], numeric, rel
                );
            }
        }
    }

    #[test]
    fn grad_matmul_chain() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut params = HashMap::new();
        params.insert("a".to_string(), rand_mat(&mut rng, 3, 4));
        params.insert("b".to_string(), rand_mat(&mut rng, 4, 2));
        check_grads(
            |t, p| {
                let a = t.param("a", &p["a"]);
                let b = t.param("b", &p["b"]);
                let c = t.matmul(a, b);
                t.sum_all(c)
            },
            params,
            1e-6,
        );
    }

    #[test]
    fn grad_matmul_bt() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut params = HashMap::new();
        params.insert("a".to_string(), rand_mat(&mut rng, 3, 4));
        params.insert("b".to_string(), rand_mat(&mut rng, 5, 4));
        check_grads(
            |t, p| {
                let a = t.param("a", &p["a"]);
                let b = t.param("b", &p["b"]);
                let c = t.matmul_bt(a, b);
                let d = t.relu(c);
                t.sum_all(d)
            },
            params,
            1e-6,
        );
    }

    #[test]
    fn grad_elementwise_ops() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut params = HashMap::new();
        params.insert("a".to_string(), rand_mat(&mut rng, 2, 5));
        params.insert("b".to_string(), rand_mat(&mut rng, 2, 5));
        params.insert("bias".to_string(), rand_mat(&mut rng, 1, 5));
        check_grads(
            |t, p| {
                let a = t.param("a", &p["a"]);
                let b = t.param("b", &p["b"]);
                let bias = t.param("bias", &p["bias"]);
                let s = t.add_row(a, bias);
                let m = t.mul(s, b);
                let d = t.sub(m, a);
                let sc = t.scale(d, 0.7);
                let sn = t.sin(sc);
                t.sum_all(sn)
            },
            params,
            1e-6,
        );
    }

    #[test]
    fn grad_concat_slice_transpose() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut params = HashMap::new();
        params.insert("a".to_string(), rand_mat(&mut rng, 3, 2));
        params.insert("b".to_string(), rand_mat(&mut rng, 3, 4));
        params.insert("c".to_string(), rand_mat(&mut rng, 2, 6));
        check_grads(
            |t, p| {
                let a = t.param("a", &p["a"]);
                let b = t.param("b", &p["b"]);
                let c = t.param("c", &p["c"]);
                let cat = t.concat_cols(&[a, b]);
                let stacked = t.concat_rows(&[cat, c]);
                let sl = t.slice_cols(stacked, 1, 5);
                let tr = t.transpose(sl);
                let mean = t.row_mean(tr);
                t.sum_all(mean)
            },
            params,
            1e-6,
        );
    }

    #[test]
    fn grad_masked_softmax() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut params = HashMap::new();
        params.insert("s".to_string(), rand_mat(&mut rng, 3, 4));
        params.insert("v".to_string(), rand_mat(&mut rng, 3, 4));
        let mask = vec![
            true, true, false, true,
            false, true, true, true,
            true, false, false, true,
        ];
        check_grads(
            move |t, p| {
                let s = t.param("s", &p["s"]);
                let v = t.param("v", &p["v"]);
                let sm = t.softmax_rows_masked(s, mask.clone());
                let w = t.mul(sm, v);
                t.sum_all(w)
            },
            params,
            1e-6,
        );
    }

    #[test]
    fn masked_softmax_rows_sum_to_one_with_exact_zeros() {
        let mut tape = Tape::new();
        let s = tape.leaf(Mat::from_vec(2, 3, vec![0.3, -5.0, 2.0, 1.0, 1.0, 1.0]));
        let mask = vec![true, false, true, true, true, false];
        let p = tape.softmax_rows_masked(s, mask);
        let out = tape.value(p);
        assert_eq!(out.at(0, 1), 0.0);
        assert_eq!(out.at(1, 2), 0.0);
        for r in 0..2 {
            let sum: f64 = out.row_slice(r).iter().sum();
            assert!((sum - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn grad_depthwise_conv() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut params = HashMap::new();
        params.insert("x".to_string(), rand_mat(&mut rng, 2, 16));
        params.insert("k".to_string(), rand_mat(&mut rng, 2, 9));
        check_grads(
            |t, p| {
                let x = t.param("x", &p["x"]);
                let k = t.param("k", &p["k"]);
                let c = t.depthwise_conv3x3(x, k, 4, 4);
                let r = t.relu(c);
                t.sum_all(r)
            },
            params,
            1e-6,
        );
    }

    #[test]
    fn grad_upsample() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut params = HashMap::new();
        params.insert("x".to_string(), rand_mat(&mut rng, 2, 6));
        params.insert("k".to_string(), rand_mat(&mut rng, 2, 9));
        check_grads(
            |t, p| {
                let x = t.param("x", &p["x"]);
                let k = t.param("k", &p["k"]);
                let u = t.upsample(x, k, 2, 3, 3);
                let s = t.sin(u);
                t.sum_all(s)
            },
            params,
            1e-6,
        );
    }

    #[test]
    fn upsample_shape_and_values() {
        let mut tape = Tape::new();
        let x = tape.leaf(Mat::from_vec(1, 2, vec![2.0, 3.0]));
        let k = tape.leaf(Mat::from_vec(1, 4, vec![1.0, 0.5, -1.0, 0.0]));
        let u = tape.upsample(x, k, 1, 2, 2);
        let out = tape.value(u);
        assert_eq!((out.rows, out.cols), (1, 8));
        // 1x2 input, factor 2: output is 2 rows x 4 cols flattened.
        assert_eq!(out.data, vec![2.0, 1.0, 3.0, 1.5, -2.0, 0.0, -3.0, 0.0]);
    }

    #[test]
    fn shared_param_accumulates_once() {
        // f(w) = sum(w * w), df/dw = 2w at a single node.
        let w = Mat::from_vec(1, 3, vec![1.0, -2.0, 0.5]);
        let mut tape = Tape::new();
        let a = tape.param("w", &w);
        let b = tape.param("w", &w);
        assert_eq!(a, b);
        let m = tape.mul(a, b);
        let s = tape.sum_all(m);
        tape.backward(s);
        let g = tape.grad(a);
        assert_eq!(g.data, vec![2.0, -4.0, 1.0]);
    }
}
