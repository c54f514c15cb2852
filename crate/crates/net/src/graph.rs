//! Tape-based reverse-mode autodiff over dense f64 arrays.
//!
//! Nodes are appended in evaluation order, so a reverse sweep is a valid
//! topological order. Nodes whose inputs need no gradient drop their backward
//! record at construction time.

use nalgebra::Vector3;

use crate::NetError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

pub(crate) enum Op {
    Leaf,
    Reshape(Var),
    Add(Var, Var),
    AddBroadcast(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Affine { x: Var, scale: Vec<f64> },
    Sigmoid(Var),
    Gelu(Var),
    Linear { x: Var, w: Var, b: Option<Var>, n: usize, din: usize, dout: usize },
    Bmm { a: Var, b: Var, ta: bool, tb: bool, batch: usize, m: usize, k: usize, n: usize },
    Softmax { x: Var, len: usize },
    Conv2d { x: Var, w: Var, b: Var, geom: ConvGeom, cols: Vec<f64> },
    GroupNorm { x: Var, gamma: Var, beta: Var, groups: usize, xhat: Vec<f64>, inv_std: Vec<f64> },
    Embedding { table: Var, ids: Vec<usize>, dim: usize },
    Gather { x: Var, idx: Vec<usize> },
    Concat { inputs: Vec<Var>, outer: usize, chunks: Vec<usize> },
    Mean(Var),
    L1Rows { x: Var, target: Vec<f64>, width: usize },
    MaskedL1 { x: Var, target: Vec<f64>, mask: Vec<f64>, pixels: usize },
    BceLogits { x: Var, target: Vec<f64>, width: usize },
    MaskedMean { x: Var, mask: Vec<f64>, len: usize, dim: usize },
    Rot6d { x: Var },
    PointMatchL1 { r: Var, targets: Vec<[f64; 9]>, points: Vec<&'static [Vector3<f64>]> },
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    batch: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

struct Node {
    shape: Vec<usize>,
    data: Vec<f64>,
    op: Op,
    requires_grad: bool,
}

/// Computation graph for one forward/backward pass.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients indexed by [`Var`]; `None` where no gradient flowed.
pub struct Grads(Vec<Option<Vec<f64>>>);

impl Grads {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.0.get(v.0).and_then(|g| g.as_deref())
    }
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

fn mismatch(op: &str, detail: String) -> NetError {
    NetError::ShapeMismatch(format!("{op}: {detail}"))
}

/// `C = A·B + beta·C` for row-major operands, optionally transposed.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(m: usize, k: usize, n: usize, a: &[f64], ta: bool, b: &[f64], tb: bool, c: &mut [f64], beta: f64) {
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    // SAFETY: slice lengths cover the strided extents checked above.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

fn gelu_grad(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2));
    let pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    cdf + x * pdf
}

/// Gram–Schmidt on one 6-vector; returns the row-major matrix with columns b1, b2, b3.
fn gram_schmidt(a: &[f64]) -> Option<([f64; 9], [Vector3<f64>; 3], f64, f64)> {
    let a1 = Vector3::new(a[0], a[1], a[2]);
    let a2 = Vector3::new(a[3], a[4], a[5]);
    let n1 = a1.norm();
    if !(n1 > 1e-12) {
        return None;
    }
    let b1 = a1 / n1;
    let u2 = a2 - b1 * b1.dot(&a2);
    let n2 = u2.norm();
    if !(n2 > 1e-9 * a2.norm().max(1e-12)) {
        return None;
    }
    let b2 = u2 / n2;
    let b3 = b1.cross(&b2);
    let mut r = [0.0; 9];
    for i in 0..3 {
        r[i * 3] = b1[i];
        r[i * 3 + 1] = b2[i];
        r[i * 3 + 2] = b3[i];
    }
    Some((r, [b1, b2, b3], n1, n2))
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<f64>, op: Op, inputs: &[Var]) -> Var {
        debug_assert_eq!(numel(&shape), data.len());
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node { shape, data, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    /// Leaf node. Trainable parameters pass `requires_grad = true`.
    pub fn leaf(&mut self, shape: &[usize], data: Vec<f64>, requires_grad: bool) -> Result<Var, NetError> {
        if numel(shape) != data.len() {
            return Err(mismatch("leaf", format!("shape {shape:?} vs {} values", data.len())));
        }
        self.nodes.push(Node { shape: shape.to_vec(), data, op: Op::Leaf, requires_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn input(&mut self, shape: &[usize], data: Vec<f64>) -> Result<Var, NetError> {
        self.leaf(shape, data, false)
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].data
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].data[0]
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var, NetError> {
        if numel(shape) != self.nodes[x.0].data.len() {
            return Err(mismatch("reshape", format!("{:?} -> {shape:?}", self.shape(x))));
        }
        let data = self.nodes[x.0].data.clone();
        Ok(self.push(shape.to_vec(), data, Op::Reshape(x), &[x]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NetError> {
        if self.shape(a) != self.shape(b) {
            return Err(mismatch("add", format!("{:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        let data = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x + y).collect();
        Ok(self.push(self.shape(a).to_vec(), data, Op::Add(a, b), &[a, b]))
    }

    /// `a + b` where `b`'s shape is a trailing suffix of `a`'s.
    pub fn add_broadcast(&mut self, a: Var, b: Var) -> Result<Var, NetError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != *sb {
            return Err(mismatch("add_broadcast", format!("{sa:?} vs {sb:?}")));
        }
        let nb = self.value(b).len();
        let bv = self.value(b);
        let data = self.value(a).iter().enumerate().map(|(i, x)| x + bv[i % nb]).collect();
        Ok(self.push(self.shape(a).to_vec(), data, Op::AddBroadcast(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, NetError> {
        if self.shape(a) != self.shape(b) {
            return Err(mismatch("mul", format!("{:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        let data = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x * y).collect();
        Ok(self.push(self.shape(a).to_vec(), data, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let data = self.value(x).iter().map(|v| v * s).collect();
        self.push(self.shape(x).to_vec(), data, Op::Scale(x, s), &[x])
    }

    /// `x * scale + offset` with constants broadcast along the last axis.
    pub fn affine(&mut self, x: Var, scale: &[f64], offset: &[f64]) -> Result<Var, NetError> {
        let last = *self.shape(x).last().unwrap_or(&0);
        if scale.len() != last || offset.len() != last {
            return Err(mismatch("affine", format!("last dim {last} vs {}/{}", scale.len(), offset.len())));
        }
        let data = self
            .value(x)
            .iter()
            .enumerate()
            .map(|(i, v)| v * scale[i % last] + offset[i % last])
            .collect();
        Ok(self.push(self.shape(x).to_vec(), data, Op::Affine { x, scale: scale.to_vec() }, &[x]))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let data = self.value(x).iter().map(|&v| sigmoid(v)).collect();
        self.push(self.shape(x).to_vec(), data, Op::Sigmoid(x), &[x])
    }

    /// Exact (erf) GELU.
    pub fn gelu(&mut self, x: Var) -> Var {
        let data = self.value(x).iter().map(|&v| gelu(v)).collect();
        self.push(self.shape(x).to_vec(), data, Op::Gelu(x), &[x])
    }

    /// `x·Wᵀ + b` over the last axis; `w` is `[out, in]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var, NetError> {
        let sx = self.shape(x).to_vec();
        let sw = self.shape(w).to_vec();
        let din = *sx.last().ok_or_else(|| mismatch("linear", "scalar input".into()))?;
        if sw.len() != 2 || sw[1] != din {
            return Err(mismatch("linear", format!("x {sx:?} w {sw:?}")));
        }
        let dout = sw[0];
        if let Some(b) = b {
            if self.shape(b) != [dout] {
                return Err(mismatch("linear", format!("bias {:?} for out {dout}", self.shape(b))));
            }
        }
        let n = numel(&sx) / din;
        let mut y = vec![0.0; n * dout];
        if let Some(b) = b {
            let bv = self.value(b);
            for row in y.chunks_mut(dout) {
                row.copy_from_slice(bv);
            }
        }
        gemm(n, din, dout, self.value(x), false, self.value(w), true, &mut y, if b.is_some() { 1.0 } else { 0.0 });
        let mut shape = sx;
        *shape.last_mut().unwrap() = dout;
        let inputs: Vec<Var> = [Some(x), Some(w), b].into_iter().flatten().collect();
        Ok(self.push(shape, y, Op::Linear { x, w, b, n, din, dout }, &inputs))
    }

    /// Batched matrix product of `[B, M, K]` and `[B, K, N]`, with optional per-operand transposes.
    pub fn bmm(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var, NetError> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] {
            return Err(mismatch("bmm", format!("{sa:?} vs {sb:?}")));
        }
        let (m, k) = if ta { (sa[2], sa[1]) } else { (sa[1], sa[2]) };
        let (kb, n) = if tb { (sb[2], sb[1]) } else { (sb[1], sb[2]) };
        if k != kb {
            return Err(mismatch("bmm", format!("{sa:?} vs {sb:?} (ta={ta}, tb={tb})")));
        }
        let batch = sa[0];
        let mut y = vec![0.0; batch * m * n];
        for i in 0..batch {
            gemm(
                m,
                k,
                n,
                &self.value(a)[i * m * k..],
                ta,
                &self.value(b)[i * k * n..],
                tb,
                &mut y[i * m * n..(i + 1) * m * n],
                0.0,
            );
        }
        Ok(self.push(vec![batch, m, n], y, Op::Bmm { a, b, ta, tb, batch, m, k, n }, &[a, b]))
    }

    /// Softmax over the last axis. `key_mask` (one flag per leading batch row block
    /// and key, shape `[B, L]`) sends masked keys to exactly zero weight.
    pub fn softmax(&mut self, x: Var, key_mask: Option<&[bool]>) -> Result<Var, NetError> {
        let shape = self.shape(x).to_vec();
        let len = *shape.last().ok_or_else(|| mismatch("softmax", "scalar input".into()))?;
        let rows = numel(&shape) / len;
        let batch = shape.first().copied().unwrap_or(1);
        if let Some(m) = key_mask {
            if m.len() != batch * len {
                return Err(mismatch("softmax", format!("mask {} for batch {batch} × {len}", m.len())));
            }
        }
        let rows_per_batch = rows / batch.max(1);
        let xv = self.value(x);
        let mut y = vec![0.0; xv.len()];
        for r in 0..rows {
            let mrow = key_mask.map(|m| &m[(r / rows_per_batch) * len..(r / rows_per_batch + 1) * len]);
            let xs = &xv[r * len..(r + 1) * len];
            let keep = |j: usize| mrow.is_none_or(|m| m[j]);
            let mx = (0..len).filter(|&j| keep(j)).map(|j| xs[j]).fold(f64::NEG_INFINITY, f64::max);
            if mx == f64::NEG_INFINITY {
                return Err(NetError::ShapeMismatch("softmax: every key masked".into()));
            }
            let ys = &mut y[r * len..(r + 1) * len];
            let mut sum = 0.0;
            for j in 0..len {
                if keep(j) {
                    ys[j] = (xs[j] - mx).exp();
                    sum += ys[j];
                }
            }
            for v in ys.iter_mut() {
                *v /= sum;
            }
        }
        Ok(self.push(shape, y, Op::Softmax { x, len }, &[x]))
    }

    /// 2D convolution, `x: [B, C, H, W]`, `w: [O, C, k, k]`, `b: [O]`, zero padding.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Result<Var, NetError> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.len() != 4 || sw.len() != 4 || sw[1] != sx[1] || sw[2] != sw[3] || self.shape(b) != [sw[0]] {
            return Err(mismatch("conv2d", format!("x {sx:?} w {sw:?} b {:?}", self.shape(b))));
        }
        let k = sw[2];
        if sx[2] + 2 * pad < k || sx[3] + 2 * pad < k || stride == 0 {
            return Err(mismatch("conv2d", format!("kernel {k} larger than padded input {sx:?}")));
        }
        let g = ConvGeom {
            batch: sx[0],
            cin: sx[1],
            h: sx[2],
            w: sx[3],
            cout: sw[0],
            k,
            stride,
            pad,
            ho: (sx[2] + 2 * pad - k) / stride + 1,
            wo: (sx[3] + 2 * pad - k) / stride + 1,
        };
        let cols = im2col(self.value(x), &g);
        let ncols = g.batch * g.ho * g.wo;
        let mut mat = vec![0.0; g.cout * ncols];
        gemm(g.cout, g.cin * k * k, ncols, self.value(w), false, &cols, false, &mut mat, 0.0);
        let bias = self.value(b);
        let plane = g.ho * g.wo;
        let mut y = vec![0.0; g.batch * g.cout * plane];
        for o in 0..g.cout {
            for bi in 0..g.batch {
                let src = &mat[o * ncols + bi * plane..o * ncols + (bi + 1) * plane];
                let dst = &mut y[(bi * g.cout + o) * plane..(bi * g.cout + o + 1) * plane];
                for (d, s) in dst.iter_mut().zip(src) {
                    *d = s + bias[o];
                }
            }
        }
        let needs_w = self.nodes[w.0].requires_grad;
        let cols = if needs_w { cols } else { Vec::new() };
        Ok(self.push(vec![g.batch, g.cout, g.ho, g.wo], y, Op::Conv2d { x, w, b, geom: g, cols }, &[x, w, b]))
    }

    /// Group normalization over `[B, C, ...]` with per-channel affine `gamma`, `beta`.
    pub fn group_norm(&mut self, x: Var, gamma: Var, beta: Var, groups: usize) -> Result<Var, NetError> {
        let sx = self.shape(x).to_vec();
        if sx.len() < 2 || groups == 0 || sx[1] % groups != 0 || self.shape(gamma) != [sx[1]] || self.shape(beta) != [sx[1]] {
            return Err(mismatch("group_norm", format!("x {sx:?} groups {groups}")));
        }
        let (batch, c) = (sx[0], sx[1]);
        let rest = numel(&sx[2..]);
        let cg = c / groups;
        let n = cg * rest;
        let xv = self.value(x);
        let (gv, bv) = (self.value(gamma), self.value(beta));
        let mut y = vec![0.0; xv.len()];
        let mut xhat = vec![0.0; xv.len()];
        let mut inv_std = vec![0.0; batch * groups];
        for bi in 0..batch {
            for gi in 0..groups {
                let off = (bi * c + gi * cg) * rest;
                let seg = &xv[off..off + n];
                let mean = seg.iter().sum::<f64>() / n as f64;
                let var = seg.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
                let is = 1.0 / (var + GN_EPS).sqrt();
                inv_std[bi * groups + gi] = is;
                for j in 0..n {
                    let ch = gi * cg + j / rest;
                    let h = (seg[j] - mean) * is;
                    xhat[off + j] = h;
                    y[off + j] = gv[ch] * h + bv[ch];
                }
            }
        }
        Ok(self.push(sx, y, Op::GroupNorm { x, gamma, beta, groups, xhat, inv_std }, &[x, gamma, beta]))
    }

    /// Row lookup: `table: [V, d]`, `ids` with leading shape `lead` → `[lead.., d]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize], lead: &[usize]) -> Result<Var, NetError> {
        let st = self.shape(table).to_vec();
        if st.len() != 2 || numel(lead) != ids.len() || ids.iter().any(|&i| i >= st[0]) {
            return Err(mismatch("embedding", format!("table {st:?}, {} ids for {lead:?}", ids.len())));
        }
        let dim = st[1];
        let tv = self.value(table);
        let mut y = Vec::with_capacity(ids.len() * dim);
        for &i in ids {
            y.extend_from_slice(&tv[i * dim..(i + 1) * dim]);
        }
        let mut shape = lead.to_vec();
        shape.push(dim);
        Ok(self.push(shape, y, Op::Embedding { table, ids: ids.to_vec(), dim }, &[table]))
    }

    /// `out[i] = x[idx[i]]`. Indices may repeat (broadcast) or skip (slice).
    pub fn gather(&mut self, x: Var, idx: Vec<usize>, shape: &[usize]) -> Result<Var, NetError> {
        let nx = self.value(x).len();
        if numel(shape) != idx.len() || idx.iter().any(|&i| i >= nx) {
            return Err(mismatch("gather", format!("{} indices for {shape:?} from {nx} values", idx.len())));
        }
        let xv = self.value(x);
        let y = idx.iter().map(|&i| xv[i]).collect();
        Ok(self.push(shape.to_vec(), y, Op::Gather { x, idx }, &[x]))
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var, NetError> {
        let first = self.shape(inputs[0]).to_vec();
        if axis >= first.len() {
            return Err(mismatch("concat", format!("axis {axis} for {first:?}")));
        }
        for v in inputs {
            let s = self.shape(*v);
            if s.len() != first.len() || (0..s.len()).any(|d| d != axis && s[d] != first[d]) {
                return Err(mismatch("concat", format!("{first:?} vs {s:?}")));
            }
        }
        let outer = numel(&first[..axis]);
        let inner = numel(&first[axis + 1..]);
        let chunks: Vec<usize> = inputs.iter().map(|v| self.shape(*v)[axis] * inner).collect();
        let mut y = Vec::with_capacity(outer * chunks.iter().sum::<usize>());
        for o in 0..outer {
            for (v, &ch) in inputs.iter().zip(&chunks) {
                y.extend_from_slice(&self.value(*v)[o * ch..(o + 1) * ch]);
            }
        }
        let mut shape = first;
        shape[axis] = inputs.iter().map(|v| self.shape(*v)[axis]).sum();
        Ok(self.push(shape, y, Op::Concat { inputs: inputs.to_vec(), outer, chunks }, inputs))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let m = v.iter().sum::<f64>() / v.len() as f64;
        self.push(vec![1], vec![m], Op::Mean(x), &[x])
    }

    /// Per-row `Σ_j |x_j − t_j|` for `x: [B, W]`.
    pub fn l1_rows(&mut self, x: Var, target: &[f64]) -> Result<Var, NetError> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 || target.len() != numel(&s) {
            return Err(mismatch("l1_rows", format!("{s:?} vs {} targets", target.len())));
        }
        let width = s[1];
        let y = self
            .value(x)
            .chunks(width)
            .zip(target.chunks(width))
            .map(|(a, t)| a.iter().zip(t).map(|(p, q)| (p - q).abs()).sum())
            .collect();
        Ok(self.push(vec![s[0]], y, Op::L1Rows { x, target: target.to_vec(), width }, &[x]))
    }

    /// Per-sample mean L1 over `[B, C, H, W]` coordinates inside the `[B, H·W]` mask.
    pub fn masked_l1(&mut self, x: Var, target: &[f64], mask: &[f64]) -> Result<Var, NetError> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 || target.len() != numel(&s) || mask.len() != s[0] * s[2] * s[3] {
            return Err(mismatch("masked_l1", format!("{s:?}, {} targets, {} mask", target.len(), mask.len())));
        }
        let (c, pixels) = (s[1], s[2] * s[3]);
        let xv = self.value(x);
        let y = (0..s[0])
            .map(|b| {
                let m = &mask[b * pixels..(b + 1) * pixels];
                let count: f64 = m.iter().sum();
                if count == 0.0 {
                    return 0.0;
                }
                let mut acc = 0.0;
                for ch in 0..c {
                    let off = (b * c + ch) * pixels;
                    for i in 0..pixels {
                        acc += m[i] * (xv[off + i] - target[off + i]).abs();
                    }
                }
                acc / (c as f64 * count)
            })
            .collect();
        Ok(self.push(vec![s[0]], y, Op::MaskedL1 { x, target: target.to_vec(), mask: mask.to_vec(), pixels }, &[x]))
    }

    /// Per-row mean binary cross-entropy with logits, `x: [B, N]`.
    pub fn bce_logits(&mut self, x: Var, target: &[f64]) -> Result<Var, NetError> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 || target.len() != numel(&s) {
            return Err(mismatch("bce_logits", format!("{s:?} vs {} targets", target.len())));
        }
        let width = s[1];
        let y = self
            .value(x)
            .chunks(width)
            .zip(target.chunks(width))
            .map(|(xs, ts)| {
                xs.iter()
                    .zip(ts)
                    .map(|(&z, &t)| z.max(0.0) - z * t + (-z.abs()).exp().ln_1p())
                    .sum::<f64>()
                    / width as f64
            })
            .collect();
        Ok(self.push(vec![s[0]], y, Op::BceLogits { x, target: target.to_vec(), width }, &[x]))
    }

    /// Mean over unmasked positions: `[B, L, d]` with `[B, L]` mask → `[B, d]`.
    pub fn masked_mean(&mut self, x: Var, mask: &[f64]) -> Result<Var, NetError> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 || mask.len() != s[0] * s[1] {
            return Err(mismatch("masked_mean", format!("{s:?} vs mask {}", mask.len())));
        }
        let (len, dim) = (s[1], s[2]);
        let xv = self.value(x);
        let mut y = vec![0.0; s[0] * dim];
        for b in 0..s[0] {
            let m = &mask[b * len..(b + 1) * len];
            let count: f64 = m.iter().sum::<f64>().max(1.0);
            for l in 0..len {
                if m[l] != 0.0 {
                    for j in 0..dim {
                        y[b * dim + j] += m[l] * xv[(b * len + l) * dim + j] / count;
                    }
                }
            }
        }
        Ok(self.push(vec![s[0], dim], y, Op::MaskedMean { x, mask: mask.to_vec(), len, dim }, &[x]))
    }

    /// Gram–Schmidt 6D → row-major rotation, `[B, 6]` → `[B, 9]`.
    pub fn rot6d(&mut self, x: Var) -> Result<Var, NetError> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 || s[1] != 6 {
            return Err(mismatch("rot6d", format!("{s:?}")));
        }
        let mut y = Vec::with_capacity(s[0] * 9);
        for row in self.value(x).chunks(6) {
            let (r, ..) = gram_schmidt(row).ok_or(NetError::Degenerate6d)?;
            y.extend_from_slice(&r);
        }
        Ok(self.push(vec![s[0], 9], y, Op::Rot6d { x }, &[x]))
    }

    /// Per-sample `mean_x ‖(R − R̄)x‖₁` with constant targets `R̄` (row-major).
    pub fn point_match_l1(
        &mut self,
        r: Var,
        targets: &[[f64; 9]],
        points: &[&'static [Vector3<f64>]],
    ) -> Result<Var, NetError> {
        let s = self.shape(r).to_vec();
        if s.len() != 2 || s[1] != 9 || targets.len() != s[0] || points.len() != s[0] {
            return Err(mismatch("point_match_l1", format!("{s:?} with {} targets", targets.len())));
        }
        let rv = self.value(r);
        let y = (0..s[0])
            .map(|b| {
                let d: Vec<f64> = (0..9).map(|i| rv[b * 9 + i] - targets[b][i]).collect();
                let pts = points[b];
                pts.iter()
                    .map(|p| {
                        (0..3)
                            .map(|i| (d[i * 3] * p.x + d[i * 3 + 1] * p.y + d[i * 3 + 2] * p.z).abs())
                            .sum::<f64>()
                    })
                    .sum::<f64>()
                    / pts.len() as f64
            })
            .collect();
        Ok(self.push(
            vec![s[0]],
            y,
            Op::PointMatchL1 { r, targets: targets.to_vec(), points: points.to_vec() },
            &[r],
        ))
    }

    /// Branch signature of every nonsmooth op: residual signs of the L1 terms
    /// and the constant rotation targets. Two points with equal signatures lie
    /// on the same smooth piece of the loss.
    pub fn regime(&self) -> Vec<f64> {
        let sign = |v: f64| if v >= 0.0 { 1.0 } else { -1.0 };
        let mut out = Vec::new();
        for node in &self.nodes {
            match &node.op {
                Op::L1Rows { x, target, .. } => {
                    out.extend(self.value(*x).iter().zip(target).map(|(p, q)| sign(p - q)));
                }
                Op::MaskedL1 { x, target, mask, pixels } => {
                    let xv = self.value(*x);
                    for (i, (p, q)) in xv.iter().zip(target).enumerate() {
                        let b = i / (xv.len() / (mask.len() / pixels));
                        if mask[b * pixels + i % pixels] != 0.0 {
                            out.push(sign(p - q));
                        }
                    }
                }
                Op::PointMatchL1 { r, targets, points } => {
                    let rv = self.value(*r);
                    for (b, (t, pts)) in targets.iter().zip(points).enumerate() {
                        out.extend_from_slice(t);
                        let d: Vec<f64> = (0..9).map(|i| rv[b * 9 + i] - t[i]).collect();
                        for p in pts.iter() {
                            for i in 0..3 {
                                out.push(sign(d[i * 3] * p.x + d[i * 3 + 1] * p.y + d[i * 3 + 2] * p.z));
                            }
                        }
                    }
                }
                _ => {}
            }
        }
        out
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Grads {
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.nodes[loss.0].requires_grad {
            return Grads(grads);
        }
        grads[loss.0] = Some(vec![1.0; self.nodes[loss.0].data.len()]);
        for i in (0..=loss.0).rev() {
            let Some(gy) = grads[i].take() else { continue };
            self.backward_node(i, &gy, &mut grads);
            grads[i] = Some(gy);
        }
        Grads(grads)
    }

    fn acc<'g>(&self, grads: &'g mut [Option<Vec<f64>>], v: Var) -> Option<&'g mut Vec<f64>> {
        let node = &self.nodes[v.0];
        if !node.requires_grad {
            return None;
        }
        Some(grads[v.0].get_or_insert_with(|| vec![0.0; node.data.len()]))
    }

    fn backward_node(&self, i: usize, gy: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::Reshape(x) => {
                if let Some(g) = self.acc(grads, *x) {
                    add_into(g, gy);
                }
            }
            Op::Add(a, b) => {
                for v in [a, b] {
                    if let Some(g) = self.acc(grads, *v) {
                        add_into(g, gy);
                    }
                }
            }
            Op::AddBroadcast(a, b) => {
                if let Some(g) = self.acc(grads, *a) {
                    add_into(g, gy);
                }
                if let Some(g) = self.acc(grads, *b) {
                    let nb = g.len();
                    for (j, v) in gy.iter().enumerate() {
                        g[j % nb] += v;
                    }
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if let Some(g) = self.acc(grads, *a) {
                    for j in 0..gy.len() {
                        g[j] += gy[j] * bv[j];
                    }
                }
                if let Some(g) = self.acc(grads, *b) {
                    for j in 0..gy.len() {
                        g[j] += gy[j] * av[j];
                    }
                }
            }
            Op::Scale(x, s) => {
                if let Some(g) = self.acc(grads, *x) {
                    for j in 0..gy.len() {
                        g[j] += gy[j] * s;
                    }
                }
            }
            Op::Affine { x, scale } => {
                let last = scale.len();
                if let Some(g) = self.acc(grads, *x) {
                    for j in 0..gy.len() {
                        g[j] += gy[j] * scale[j % last];
                    }
                }
            }
            Op::Sigmoid(x) => {
                if let Some(g) = self.acc(grads, *x) {
                    for j in 0..gy.len() {
                        let s = node.data[j];
                        g[j] += gy[j] * s * (1.0 - s);
                    }
                }
            }
            Op::Gelu(x) => {
                let xv = self.value(*x);
                if let Some(g) = self.acc(grads, *x) {
                    for j in 0..gy.len() {
                        g[j] += gy[j] * gelu_grad(xv[j]);
                    }
                }
            }
            Op::Linear { x, w, b, n, din, dout } => {
                let (n, din, dout) = (*n, *din, *dout);
                if let Some(g) = self.acc(grads, *x) {
                    gemm(n, dout, din, gy, false, self.value(*w), false, g, 1.0);
                }
                if let Some(g) = self.acc(grads, *w) {
                    gemm(dout, n, din, gy, true, self.value(*x), false, g, 1.0);
                }
                if let Some(b) = b {
                    if let Some(g) = self.acc(grads, *b) {
                        for row in gy.chunks(dout) {
                            add_into(g, row);
                        }
                    }
                }
            }
            Op::Bmm { a, b, ta, tb, batch, m, k, n } => {
                let (m, k, n) = (*m, *k, *n);
                let (av, bv) = (self.value(*a), self.value(*b));
                if let Some(g) = self.acc(grads, *a) {
                    for i in 0..*batch {
                        let gyi = &gy[i * m * n..(i + 1) * m * n];
                        let gai = &mut g[i * m * k..(i + 1) * m * k];
                        let bi = &bv[i * k * n..(i + 1) * k * n];
                        if *ta {
                            // dA (k×m) = B·gYᵀ
                            gemm(k, n, m, bi, *tb, gyi, true, gai, 1.0);
                        } else {
                            // dA (m×k) = gY·Bᵀ
                            gemm(m, n, k, gyi, false, bi, !*tb, gai, 1.0);
                        }
                    }
                }
                if let Some(g) = self.acc(grads, *b) {
                    for i in 0..*batch {
                        let gyi = &gy[i * m * n..(i + 1) * m * n];
                        let gbi = &mut g[i * k * n..(i + 1) * k * n];
                        let ai = &av[i * m * k..(i + 1) * m * k];
                        if *tb {
                            // dB (n×k) = gYᵀ·A
                            gemm(n, m, k, gyi, true, ai, *ta, gbi, 1.0);
                        } else {
                            // dB (k×n) = Aᵀ·gY
                            gemm(k, m, n, ai, !*ta, gyi, false, gbi, 1.0);
                        }
                    }
                }
            }
            Op::Softmax { x, len } => {
                if let Some(g) = self.acc(grads, *x) {
                    for (r, (ys, gs)) in node.data.chunks(*len).zip(gy.chunks(*len)).enumerate() {
                        let dot: f64 = ys.iter().zip(gs).map(|(y, g)| y * g).sum();
                        for j in 0..*len {
                            g[r * len + j] += ys[j] * (gs[j] - dot);
                        }
                    }
                }
            }
            Op::Conv2d { x, w, b, geom, cols } => {
                let g_ = *geom;
                let plane = g_.ho * g_.wo;
                let ncols = g_.batch * plane;
                let mut gmat = vec![0.0; g_.cout * ncols];
                for o in 0..g_.cout {
                    for bi in 0..g_.batch {
                        gmat[o * ncols + bi * plane..o * ncols + (bi + 1) * plane]
                            .copy_from_slice(&gy[(bi * g_.cout + o) * plane..(bi * g_.cout + o + 1) * plane]);
                    }
                }
                let kk = g_.cin * g_.k * g_.k;
                if let Some(gw) = self.acc(grads, *w) {
                    gemm(g_.cout, ncols, kk, &gmat, false, cols, true, gw, 1.0);
                }
                if let Some(gb) = self.acc(grads, *b) {
                    for o in 0..g_.cout {
                        gb[o] += gmat[o * ncols..(o + 1) * ncols].iter().sum::<f64>();
                    }
                }
                if self.nodes[x.0].requires_grad {
                    let mut gcols = vec![0.0; kk * ncols];
                    gemm(kk, g_.cout, ncols, self.value(*w), true, &gmat, false, &mut gcols, 0.0);
                    let gx = self.acc(grads, *x).expect("requires grad");
                    col2im(&gcols, &g_, gx);
                }
            }
            Op::GroupNorm { x, gamma, beta, groups, xhat, inv_std } => {
                let s = &node.shape;
                let (batch, c) = (s[0], s[1]);
                let rest = numel(&s[2..]);
                let cg = c / groups;
                let n = cg * rest;
                let gv = self.value(*gamma);
                if let Some(g) = self.acc(grads, *gamma) {
                    for j in 0..gy.len() {
                        g[(j / rest) % c] += gy[j] * xhat[j];
                    }
                }
                if let Some(g) = self.acc(grads, *beta) {
                    for j in 0..gy.len() {
                        g[(j / rest) % c] += gy[j];
                    }
                }
                if let Some(g) = self.acc(grads, *x) {
                    for bi in 0..batch {
                        for gi in 0..*groups {
                            let off = (bi * c + gi * cg) * rest;
                            let is = inv_std[bi * groups + gi];
                            let mut sum_d = 0.0;
                            let mut sum_dx = 0.0;
                            for j in 0..n {
                                let d = gy[off + j] * gv[gi * cg + j / rest];
                                sum_d += d;
                                sum_dx += d * xhat[off + j];
                            }
                            for j in 0..n {
                                let d = gy[off + j] * gv[gi * cg + j / rest];
                                g[off + j] += is / n as f64 * (n as f64 * d - sum_d - xhat[off + j] * sum_dx);
                            }
                        }
                    }
                }
            }
            Op::Embedding { table, ids, dim } => {
                if let Some(g) = self.acc(grads, *table) {
                    for (r, &id) in ids.iter().enumerate() {
                        for j in 0..*dim {
                            g[id * dim + j] += gy[r * dim + j];
                        }
                    }
                }
            }
            Op::Gather { x, idx } => {
                if let Some(g) = self.acc(grads, *x) {
                    for (o, &i) in idx.iter().enumerate() {
                        g[i] += gy[o];
                    }
                }
            }
            Op::Concat { inputs, outer, chunks } => {
                let total: usize = chunks.iter().sum();
                let mut start = 0;
                for (v, &ch) in inputs.iter().zip(chunks) {
                    if let Some(g) = self.acc(grads, *v) {
                        for o in 0..*outer {
                            let src = &gy[o * total + start..o * total + start + ch];
                            add_into(&mut g[o * ch..(o + 1) * ch], src);
                        }
                    }
                    start += ch;
                }
            }
            Op::Mean(x) => {
                if let Some(g) = self.acc(grads, *x) {
                    let s = gy[0] / g.len() as f64;
                    for v in g.iter_mut() {
                        *v += s;
                    }
                }
            }
            Op::L1Rows { x, target, width } => {
                let xv = self.value(*x);
                if let Some(g) = self.acc(grads, *x) {
                    for j in 0..xv.len() {
                        g[j] += gy[j / width] * sign(xv[j] - target[j]);
                    }
                }
            }
            Op::MaskedL1 { x, target, mask, pixels } => {
                let xv = self.value(*x);
                let c = self.shape(*x)[1];
                if let Some(g) = self.acc(grads, *x) {
                    for b in 0..gy.len() {
                        let m = &mask[b * pixels..(b + 1) * pixels];
                        let count: f64 = m.iter().sum();
                        if count == 0.0 {
                            continue;
                        }
                        let s = gy[b] / (c as f64 * count);
                        for ch in 0..c {
                            let off = (b * c + ch) * pixels;
                            for i in 0..*pixels {
                                g[off + i] += s * m[i] * sign(xv[off + i] - target[off + i]);
                            }
                        }
                    }
                }
            }
            Op::BceLogits { x, target, width } => {
                let xv = self.value(*x);
                if let Some(g) = self.acc(grads, *x) {
                    for j in 0..xv.len() {
                        g[j] += gy[j / width] * (sigmoid(xv[j]) - target[j]) / *width as f64;
                    }
                }
            }
            Op::MaskedMean { x, mask, len, dim } => {
                if let Some(g) = self.acc(grads, *x) {
                    for b in 0..gy.len() / dim {
                        let m = &mask[b * len..(b + 1) * len];
                        let count: f64 = m.iter().sum::<f64>().max(1.0);
                        for l in 0..*len {
                            for j in 0..*dim {
                                g[(b * len + l) * dim + j] += m[l] * gy[b * dim + j] / count;
                            }
                        }
                    }
                }
            }
            Op::Rot6d { x } => {
                let xv = self.value(*x);
                if let Some(g) = self.acc(grads, *x) {
                    for (b, row) in xv.chunks(6).enumerate() {
                        let ga = rot6d_backward(row, &gy[b * 9..(b + 1) * 9]);
                        add_into(&mut g[b * 6..(b + 1) * 6], &ga);
                    }
                }
            }
            Op::PointMatchL1 { r, targets, points } => {
                let rv = self.value(*r);
                if let Some(g) = self.acc(grads, *r) {
                    for b in 0..gy.len() {
                        let d: Vec<f64> = (0..9).map(|i| rv[b * 9 + i] - targets[b][i]).collect();
                        let pts = points[b];
                        let s = gy[b] / pts.len() as f64;
                        let mut acc = [0.0; 9];
                        for p in pts {
                            for i in 0..3 {
                                let e = d[i * 3] * p.x + d[i * 3 + 1] * p.y + d[i * 3 + 2] * p.z;
                                let sg = sign(e);
                                acc[i * 3] += sg * p.x;
                                acc[i * 3 + 1] += sg * p.y;
                                acc[i * 3 + 2] += sg * p.z;
                            }
                        }
                        for i in 0..9 {
                            g[b * 9 + i] += s * acc[i];
                        }
                    }
                }
            }
        }
    }
}

pub(crate) const GN_EPS: f64 = 1e-5;

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn im2col(x: &[f64], g: &ConvGeom) -> Vec<f64> {
    let plane = g.ho * g.wo;
    let ncols = g.batch * plane;
    let mut cols = vec![0.0; g.cin * g.k * g.k * ncols];
    for c in 0..g.cin {
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = (c * g.k + ki) * g.k + kj;
                let dst = &mut cols[row * ncols..(row + 1) * ncols];
                for b in 0..g.batch {
                    let src = &x[(b * g.cin + c) * g.h * g.w..];
                    for oh in 0..g.ho {
                        let ih = (oh * g.stride + ki) as isize - g.pad as isize;
                        if ih < 0 || ih >= g.h as isize {
                            continue;
                        }
                        for ow in 0..g.wo {
                            let iw = (ow * g.stride + kj) as isize - g.pad as isize;
                            if iw >= 0 && iw < g.w as isize {
                                dst[b * plane + oh * g.wo + ow] = src[ih as usize * g.w + iw as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im(cols: &[f64], g: &ConvGeom, gx: &mut [f64]) {
    let plane = g.ho * g.wo;
    let ncols = g.batch * plane;
    for c in 0..g.cin {
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = (c * g.k + ki) * g.k + kj;
                let src = &cols[row * ncols..(row + 1) * ncols];
                for b in 0..g.batch {
                    let dst = &mut gx[(b * g.cin + c) * g.h * g.w..(b * g.cin + c + 1) * g.h * g.w];
                    for oh in 0..g.ho {
                        let ih = (oh * g.stride + ki) as isize - g.pad as isize;
                        if ih < 0 || ih >= g.h as isize {
                            continue;
                        }
                        for ow in 0..g.wo {
                            let iw = (ow * g.stride + kj) as isize - g.pad as isize;
                            if iw >= 0 && iw < g.w as isize {
                                dst[ih as usize * g.w + iw as usize] += src[b * plane + oh * g.wo + ow];
                            }
                        }
                    }
                }
            }
        }
    }
}

fn rot6d_backward(a: &[f64], gr: &[f64]) -> [f64; 6] {
    let Some((_, [b1, b2, _], n1, n2)) = gram_schmidt(a) else {
        return [0.0; 6];
    };
    let a2 = Vector3::new(a[3], a[4], a[5]);
    let col = |j: usize| Vector3::new(gr[j], gr[3 + j], gr[6 + j]);
    let g_b3 = col(2);
    let mut g_b1 = col(0) + b2.cross(&g_b3);
    let g_b2 = col(1) + g_b3.cross(&b1);
    let g_u2 = (g_b2 - b2 * b2.dot(&g_b2)) / n2;
    let g_a2 = g_u2 - b1 * b1.dot(&g_u2);
    g_b1 -= g_u2 * b1.dot(&a2) + a2 * b1.dot(&g_u2);
    let g_a1 = (g_b1 - b1 * b1.dot(&g_b1)) / n1;
    [g_a1.x, g_a1.y, g_a1.z, g_a2.x, g_a2.y, g_a2.z]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gelu_values() {
        let mut g = Graph::new();
        let x = g.input(&[3], vec![0.0, 1.0, -1.0]).unwrap();
        let y = g.gelu(x);
        let v = g.value(y);
        assert_eq!(v[0], 0.0);
        assert!((v[1] - 0.8413447460685429).abs() < 1e-12);
        assert!((v[2] + 0.15865525393145707).abs() < 1e-12);
    }

    #[test]
    fn group_norm_is_standardized() {
        let mut g = Graph::new();
        let data: Vec<f64> = (0..2 * 8 * 5).map(|i| ((i * 37 % 23) as f64).sin() * 3.0 + 1.0).collect();
        let x = g.input(&[2, 8, 5], data).unwrap();
        let gamma = g.input(&[8], vec![1.0; 8]).unwrap();
        let beta = g.input(&[8], vec![0.0; 8]).unwrap();
        let y = g.group_norm(x, gamma, beta, 4).unwrap();
        for seg in g.value(y).chunks(10) {
            let m = seg.iter().sum::<f64>() / 10.0;
            let v = seg.iter().map(|a| (a - m) * (a - m)).sum::<f64>() / 10.0;
            assert!(m.abs() < 1e-6);
            // ε shrinks the variance slightly below one
            assert!((v - 1.0).abs() < 1e-4);
        }
    }

    #[test]
    fn masked_softmax_rows() {
        let mut g = Graph::new();
        let x = g.input(&[2, 2, 3], vec![0.3, -1.0, 2.0, 5.0, 1.0, 0.0, 0.1, 0.2, 0.3, -2.0, 4.0, 1.0]).unwrap();
        let mask = [true, true, false, true, false, true];
        let y = g.softmax(x, Some(&mask)).unwrap();
        let v = g.value(y);
        for (r, row) in v.chunks(3).enumerate() {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            let b = r / 2;
            for j in 0..3 {
                if !mask[b * 3 + j] {
                    assert_eq!(row[j], 0.0);
                }
            }
        }
        let all_masked = g.input(&[1, 1, 2], vec![0.0, 0.0]).unwrap();
        assert!(g.softmax(all_masked, Some(&[false, false])).is_err());
    }

    #[test]
    fn shape_errors() {
        let mut g = Graph::new();
        let a = g.input(&[2, 3], vec![0.0; 6]).unwrap();
        let b = g.input(&[3, 2], vec![0.0; 6]).unwrap();
        assert!(matches!(g.add(a, b), Err(NetError::ShapeMismatch(_))));
        let w = g.input(&[4, 2], vec![0.0; 8]).unwrap();
        assert!(g.linear(a, w, None).is_err());
        assert!(g.rot6d(a).is_err());
        assert!(g.leaf(&[2, 2], vec![0.0; 3], true).is_err());
    }

    #[test]
    fn conv_matches_direct_sum() {
        let mut g = Graph::new();
        let xv: Vec<f64> = (0..2 * 3 * 5 * 5).map(|i| (i as f64 * 0.37).sin()).collect();
        let wv: Vec<f64> = (0..4 * 3 * 9).map(|i| (i as f64 * 0.11).cos()).collect();
        let bv = vec![0.1, -0.2, 0.3, 0.0];
        let x = g.input(&[2, 3, 5, 5], xv.clone()).unwrap();
        let w = g.input(&[4, 3, 3, 3], wv.clone()).unwrap();
        let b = g.input(&[4], bv.clone()).unwrap();
        let y = g.conv2d(x, w, b, 2, 1).unwrap();
        assert_eq!(g.shape(y), &[2, 4, 3, 3]);
        let yv = g.value(y);
        for bi in 0..2 {
            for o in 0..4 {
                for oh in 0..3 {
                    for ow in 0..3 {
                        let mut s = bv[o];
                        for c in 0..3 {
                            for ki in 0..3 {
                                for kj in 0..3 {
                                    let ih = (oh * 2 + ki) as isize - 1;
                                    let iw = (ow * 2 + kj) as isize - 1;
                                    if (0..5).contains(&ih) && (0..5).contains(&iw) {
                                        s += wv[((o * 3 + c) * 3 + ki) * 3 + kj]
                                            * xv[((bi * 3 + c) * 5 + ih as usize) * 5 + iw as usize];
                                    }
                                }
                            }
                        }
                        assert!((yv[((bi * 4 + o) * 3 + oh) * 3 + ow] - s).abs() < 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn rot6d_outputs_rotations() {
        let mut g = Graph::new();
        let x = g.input(&[2, 6], vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.3, -2.0, 0.5, 1.0, 1.0, 1.0]).unwrap();
        let r = g.rot6d(x).unwrap();
        let v = g.value(r);
        assert_eq!(&v[..9], &[1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]);
        let m = nalgebra::Matrix3::from_row_slice(&v[9..]);
        assert!((m.transpose() * m - nalgebra::Matrix3::identity()).norm() < 1e-12);
        assert!((m.determinant() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn frozen_inputs_skip_backward() {
        let mut g = Graph::new();
        let a = g.leaf(&[2], vec![1.0, 2.0], false).unwrap();
        let b = g.leaf(&[2], vec![3.0, 4.0], true).unwrap();
        let c = g.mul(a, b).unwrap();
        let l = g.mean(c);
        let grads = g.backward(l);
        assert!(grads.get(a).is_none());
        assert_eq!(grads.get(b).unwrap(), &[0.5, 1.0]);
    }
}
