use super::gemm::gemm;
use super::{check_finite, Tensor};
use crate::error::{Error, Result};

const BN_EPS: f64 = 1e-5;
const NORM_EPS: f64 = 1e-12;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Batch-norm behaviour: normalize by batch statistics, or by supplied
/// running statistics.
#[derive(Clone, Copy, Debug)]
pub enum BnMode<'a> {
    Train,
    Eval { mean: &'a [f64], var: &'a [f64] },
}

/// Per-channel statistics of one training-mode batch-norm call. `var` is the
/// unbiased estimate, as used for running averages.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

/// Argument order of a KL divergence against a fixed target distribution.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KlDirection {
    /// `KL(pred ‖ target)`
    #[default]
    PredToTarget,
    /// `KL(target ‖ pred)`
    TargetToPred,
}

enum Op {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
    },
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        train: bool,
    },
    Relu {
        x: Var,
    },
    MeanPool {
        x: Var,
    },
    Add {
        a: Var,
        b: Var,
    },
    Sub {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Scale {
        x: Var,
        c: f64,
    },
    Concat {
        parts: Vec<Var>,
    },
    SliceRows {
        x: Var,
        start: usize,
    },
    Reshape {
        x: Var,
    },
    Transpose {
        x: Var,
    },
    Softmax {
        x: Var,
    },
    LogSoftmax {
        x: Var,
    },
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
    KlDiv {
        p: Var,
        q: Var,
    },
    Reparam {
        mean: Var,
        logvar: Var,
        noise: Var,
    },
    Sum {
        x: Var,
    },
    Mean {
        x: Var,
    },
    NegSqDist {
        q: Var,
        p: Var,
    },
    GroupMean {
        x: Var,
        groups: Vec<usize>,
        counts: Vec<usize>,
    },
    RowNormalize {
        x: Var,
        sums: Vec<f64>,
    },
    L2NormalizeRows {
        x: Var,
        norms: Vec<f64>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Define-by-run computation record. Build a fresh tape per forward pass.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    backward_done: bool,
}

fn shape_err(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Error {
    Error::Shape {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}

fn rows_cols(op: &'static str, shape: &[usize]) -> Result<(usize, usize)> {
    match shape {
        [r, c] => Ok((*r, *c)),
        _ => Err(Error::invalid(format!(
            "{op}: expected a 2-d tensor, got shape {shape:?}"
        ))),
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].value.grad()
    }

    pub fn item(&self, v: Var) -> f64 {
        self.nodes[v.0].value.item()
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].value.requires_grad()
    }

    /// Records a leaf. Its `requires_grad` flag is taken from the tensor.
    pub fn leaf(&mut self, tensor: Tensor) -> Result<Var> {
        check_finite("leaf", tensor.data())?;
        Ok(self.leaf_unchecked(tensor))
    }

    pub(crate) fn leaf_unchecked(&mut self, mut tensor: Tensor) -> Var {
        tensor.set_grad(None);
        self.nodes.push(Node {
            value: tensor,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records a leaf that never receives a gradient.
    pub fn constant(&mut self, mut tensor: Tensor) -> Result<Var> {
        tensor.set_requires_grad(false);
        self.leaf(tensor)
    }

    fn push(&mut self, name: &str, shape: Vec<usize>, data: Vec<f64>, op: Op, requires_grad: bool) -> Result<Var> {
        check_finite(name, &data)?;
        let mut value = Tensor::from_parts(shape, data);
        value.set_requires_grad(requires_grad);
        self.nodes.push(Node { value, op });
        Ok(Var(self.nodes.len() - 1))
    }

    // ---------------------------------------------------------------- linear algebra

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = rows_cols("matmul", self.shape(a))?;
        let (k2, n) = rows_cols("matmul", self.shape(b))?;
        if k != k2 {
            return Err(shape_err("matmul", self.shape(a), self.shape(b)));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.data(a), false, self.data(b), false, 0.0, &mut out);
        let rg = self.rg(a) || self.rg(b);
        self.push("matmul", vec![m, n], out, Op::MatMul { a, b }, rg)
    }

    /// `x · wᵀ + b` with `x: B×in`, `w: out×in`, `b: out`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (batch, fan_in) = rows_cols("linear", self.shape(x))?;
        let (fan_out, w_in) = rows_cols("linear", self.shape(w))?;
        if w_in != fan_in {
            return Err(shape_err("linear", self.shape(x), self.shape(w)));
        }
        if let Some(b) = b {
            if self.shape(b) != [fan_out] {
                return Err(shape_err("linear", self.shape(w), self.shape(b)));
            }
        }
        let mut out = vec![0.0; batch * fan_out];
        if let Some(b) = b {
            let bias = self.data(b);
            for row in out.chunks_exact_mut(fan_out) {
                row.copy_from_slice(bias);
            }
        }
        let beta = if b.is_some() { 1.0 } else { 0.0 };
        gemm(
            batch,
            fan_in,
            fan_out,
            self.data(x),
            false,
            self.data(w),
            true,
            beta,
            &mut out,
        );
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        self.push("linear", vec![batch, fan_out], out, Op::Linear { x, w, b }, rg)
    }

    /// 2-d convolution with zero padding. `x: N×C×H×W`, `w: O×C×KH×KW`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        let (n, c, h, wd) = match xs[..] {
            [n, c, h, w] => (n, c, h, w),
            _ => return Err(shape_err("conv2d", &xs, &ws)),
        };
        let (oc, wc, kh, kw) = match ws[..] {
            [o, c, kh, kw] => (o, c, kh, kw),
            _ => return Err(shape_err("conv2d", &xs, &ws)),
        };
        if wc != c || stride == 0 || h + 2 * pad < kh || wd + 2 * pad < kw {
            return Err(shape_err("conv2d", &xs, &ws));
        }
        if let Some(b) = b {
            if self.shape(b) != [oc] {
                return Err(shape_err("conv2d", &ws, self.shape(b)));
            }
        }
        let geo = ConvGeom::new(c, h, wd, kh, kw, stride, pad);
        let p = geo.oh * geo.ow;
        let ckk = c * kh * kw;
        let mut out = vec![0.0; n * oc * p];
        let mut cols = vec![0.0; ckk * p];
        let xd = self.data(x);
        let wdta = self.data(w);
        for i in 0..n {
            geo.im2col(&xd[i * c * h * wd..(i + 1) * c * h * wd], &mut cols);
            let y = &mut out[i * oc * p..(i + 1) * oc * p];
            gemm(oc, ckk, p, wdta, false, &cols, false, 0.0, y);
            if let Some(b) = b {
                let bias = self.data(b);
                for (o, row) in y.chunks_exact_mut(p).enumerate() {
                    row.iter_mut().for_each(|v| *v += bias[o]);
                }
            }
        }
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        self.push(
            "conv2d",
            vec![n, oc, geo.oh, geo.ow],
            out,
            Op::Conv2d { x, w, b, stride, pad },
            rg,
        )
    }

    // ---------------------------------------------------------------- normalization & activations

    /// Batch normalization over `N×C` or `N×C×H×W` input, per channel.
    /// In training mode the batch statistics are returned for the caller's
    /// running averages.
    pub fn batch_norm(&mut self, x: Var, gamma: Var, beta: Var, mode: BnMode<'_>) -> Result<(Var, Option<BatchStats>)> {
        let xs = self.shape(x).to_vec();
        let (n, c, s) = match xs[..] {
            [n, c] => (n, c, 1),
            [n, c, h, w] => (n, c, h * w),
            _ => return Err(Error::invalid(format!("batch_norm: unsupported shape {xs:?}"))),
        };
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(shape_err("batch_norm", &xs, self.shape(gamma)));
        }
        let xd = self.data(x);
        let g = self.data(gamma);
        let bt = self.data(beta);
        let m = (n * s) as f64;
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        let train = matches!(mode, BnMode::Train);
        match mode {
            BnMode::Train => {
                for i in 0..n {
                    for ch in 0..c {
                        let base = (i * c + ch) * s;
                        mean[ch] += xd[base..base + s].iter().sum::<f64>();
                    }
                }
                mean.iter_mut().for_each(|v| *v /= m);
                for i in 0..n {
                    for ch in 0..c {
                        let base = (i * c + ch) * s;
                        var[ch] += xd[base..base + s].iter().map(|v| (v - mean[ch]).powi(2)).sum::<f64>();
                    }
                }
                var.iter_mut().for_each(|v| *v /= m);
            }
            BnMode::Eval { mean: rm, var: rv } => {
                if rm.len() != c || rv.len() != c {
                    return Err(shape_err("batch_norm", &xs, &[rm.len()]));
                }
                mean.copy_from_slice(rm);
                var.copy_from_slice(rv);
            }
        }
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
        let mut xhat = vec![0.0; xd.len()];
        let mut out = vec![0.0; xd.len()];
        for i in 0..n {
            for ch in 0..c {
                let base = (i * c + ch) * s;
                for j in base..base + s {
                    xhat[j] = (xd[j] - mean[ch]) * inv_std[ch];
                    out[j] = g[ch] * xhat[j] + bt[ch];
                }
            }
        }
        let stats = train.then(|| {
            let unbias = if m > 1.0 { m / (m - 1.0) } else { 1.0 };
            BatchStats {
                mean: mean.clone(),
                var: var.iter().map(|v| v * unbias).collect(),
            }
        });
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        let v = self.push(
            "batch_norm",
            xs,
            out,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
            },
            rg,
        )?;
        Ok((v, stats))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let out = self.data(x).iter().map(|v| v.max(0.0)).collect();
        let rg = self.rg(x);
        self.push("relu", self.shape(x).to_vec(), out, Op::Relu { x }, rg)
    }

    /// 2×2 average pooling with stride 2 over `N×C×H×W` (odd trailing
    /// rows/columns are dropped).
    pub fn mean_pool2(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let (n, c, h, w) = match xs[..] {
            [n, c, h, w] if h >= 2 && w >= 2 => (n, c, h, w),
            _ => return Err(Error::invalid(format!("mean_pool2: unsupported shape {xs:?}"))),
        };
        let (oh, ow) = (h / 2, w / 2);
        let xd = self.data(x);
        let mut out = vec![0.0; n * c * oh * ow];
        for plane in 0..n * c {
            let src = &xd[plane * h * w..];
            let dst = &mut out[plane * oh * ow..];
            for i in 0..oh {
                for j in 0..ow {
                    let a = src[2 * i * w + 2 * j];
                    let b = src[2 * i * w + 2 * j + 1];
                    let cc = src[(2 * i + 1) * w + 2 * j];
                    let d = src[(2 * i + 1) * w + 2 * j + 1];
                    dst[i * ow + j] = 0.25 * (a + b + cc + d);
                }
            }
        }
        let rg = self.rg(x);
        self.push("mean_pool2", vec![n, c, oh, ow], out, Op::MeanPool { x }, rg)
    }

    // ---------------------------------------------------------------- elementwise

    fn binary(&mut self, name: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(name, self.shape(a), self.shape(b)));
        }
        let out = self.data(a).iter().zip(self.data(b)).map(|(x, y)| f(*x, *y)).collect();
        let rg = self.rg(a) || self.rg(b);
        self.push(name, self.shape(a).to_vec(), out, op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add { a, b })
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub { a, b })
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul { a, b })
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        if !c.is_finite() {
            return Err(Error::NonFinite {
                op: "scale".into(),
                index: 0,
            });
        }
        let out = self.data(x).iter().map(|v| v * c).collect();
        let rg = self.rg(x);
        self.push("scale", self.shape(x).to_vec(), out, Op::Scale { x, c }, rg)
    }

    // ---------------------------------------------------------------- structural

    /// Concatenates along the leading axis.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| Error::invalid("concat: no inputs"))?;
        let tail = self.shape(first)[1..].to_vec();
        let mut rows = 0;
        let mut out = Vec::new();
        for &p in parts {
            let s = self.shape(p);
            if s.is_empty() || s[1..] != tail[..] {
                return Err(shape_err("concat", self.shape(first), s));
            }
            rows += s[0];
            out.extend_from_slice(self.data(p));
        }
        let mut shape = vec![rows];
        shape.extend(tail);
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push("concat", shape, out, Op::Concat { parts: parts.to_vec() }, rg)
    }

    /// Rows `start..end` along the leading axis.
    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.is_empty() || start >= end || end > s[0] {
            return Err(Error::invalid(format!(
                "slice_rows: range {start}..{end} out of bounds for shape {s:?}"
            )));
        }
        let row: usize = s[1..].iter().product();
        let out = self.data(x)[start * row..end * row].to_vec();
        let mut shape = s.clone();
        shape[0] = end - start;
        let rg = self.rg(x);
        self.push("slice_rows", shape, out, Op::SliceRows { x, start }, rg)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        if shape.iter().product::<usize>() != self.value(x).numel() {
            return Err(shape_err("reshape", self.shape(x), shape));
        }
        let out = self.data(x).to_vec();
        let rg = self.rg(x);
        self.push("reshape", shape.to_vec(), out, Op::Reshape { x }, rg)
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let (r, c) = rows_cols("transpose", self.shape(x))?;
        let xd = self.data(x);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = xd[i * c + j];
            }
        }
        let rg = self.rg(x);
        self.push("transpose", vec![c, r], out, Op::Transpose { x }, rg)
    }

    // ---------------------------------------------------------------- softmax family & losses

    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let (r, c) = rows_cols("softmax", self.shape(x))?;
        let out = softmax_rows(self.data(x), r, c);
        let rg = self.rg(x);
        self.push("softmax", vec![r, c], out, Op::Softmax { x }, rg)
    }

    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        let (r, c) = rows_cols("log_softmax", self.shape(x))?;
        let xd = self.data(x);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = &xd[i * c..(i + 1) * c];
            let lse = log_sum_exp(row);
            for j in 0..c {
                out[i * c + j] = row[j] - lse;
            }
        }
        let rg = self.rg(x);
        self.push("log_softmax", vec![r, c], out, Op::LogSoftmax { x }, rg)
    }

    /// Mean over rows of `-log softmax(logits)[label]`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (r, c) = rows_cols("cross_entropy", self.shape(logits))?;
        if labels.len() != r {
            return Err(shape_err("cross_entropy", self.shape(logits), &[labels.len()]));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(Error::invalid(format!(
                "cross_entropy: label {bad} out of range 0..{c}"
            )));
        }
        let xd = self.data(logits);
        let probs = softmax_rows(xd, r, c);
        let mut loss = 0.0;
        for (i, &l) in labels.iter().enumerate() {
            let row = &xd[i * c..(i + 1) * c];
            loss += log_sum_exp(row) - row[l];
        }
        loss /= r as f64;
        let rg = self.rg(logits);
        self.push(
            "cross_entropy",
            Vec::new(),
            vec![loss],
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            rg,
        )
    }

    /// Mean over rows of `KL(p_row ‖ q_row)`; both inputs are strictly
    /// positive row distributions.
    pub fn kl_div(&mut self, p: Var, q: Var) -> Result<Var> {
        let (r, c) = rows_cols("kl_div", self.shape(p))?;
        if self.shape(q) != [r, c] {
            return Err(shape_err("kl_div", self.shape(p), self.shape(q)));
        }
        let pd = self.data(p);
        let qd = self.data(q);
        if pd.iter().chain(qd).any(|&v| v <= 0.0) {
            return Err(Error::invalid("kl_div: distributions must be strictly positive"));
        }
        let kl: f64 = pd.iter().zip(qd).map(|(a, b)| a * (a.ln() - b.ln())).sum::<f64>() / r as f64;
        let rg = self.rg(p) || self.rg(q);
        self.push("kl_div", Vec::new(), vec![kl], Op::KlDiv { p, q }, rg)
    }

    /// `mean + exp(logvar / 2) ⊙ noise`.
    pub fn reparameterize(&mut self, mean: Var, logvar: Var, noise: Var) -> Result<Var> {
        if self.shape(mean) != self.shape(logvar) || self.shape(mean) != self.shape(noise) {
            return Err(shape_err("reparameterize", self.shape(mean), self.shape(noise)));
        }
        let out = self
            .data(mean)
            .iter()
            .zip(self.data(logvar))
            .zip(self.data(noise))
            .map(|((m, lv), e)| m + (0.5 * lv).exp() * e)
            .collect();
        let rg = self.rg(mean) || self.rg(logvar) || self.rg(noise);
        self.push(
            "reparameterize",
            self.shape(mean).to_vec(),
            out,
            Op::Reparam { mean, logvar, noise },
            rg,
        )
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.data(x).iter().sum();
        let rg = self.rg(x);
        self.push("sum", Vec::new(), vec![s], Op::Sum { x }, rg)
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let d = self.data(x);
        let s = d.iter().sum::<f64>() / d.len() as f64;
        let rg = self.rg(x);
        self.push("mean", Vec::new(), vec![s], Op::Mean { x }, rg)
    }

    // ---------------------------------------------------------------- metric-learning helpers

    /// `out[i][j] = -‖q_i - p_j‖²` for `q: A×D`, `p: B×D`.
    pub fn neg_sq_dist(&mut self, q: Var, p: Var) -> Result<Var> {
        let (a, d) = rows_cols("neg_sq_dist", self.shape(q))?;
        let (b, d2) = rows_cols("neg_sq_dist", self.shape(p))?;
        if d != d2 {
            return Err(shape_err("neg_sq_dist", self.shape(q), self.shape(p)));
        }
        let qd = self.data(q);
        let pd = self.data(p);
        let mut out = vec![0.0; a * b];
        for i in 0..a {
            let qi = &qd[i * d..(i + 1) * d];
            for j in 0..b {
                let pj = &pd[j * d..(j + 1) * d];
                out[i * b + j] = -qi.iter().zip(pj).map(|(x, y)| (x - y) * (x - y)).sum::<f64>();
            }
        }
        let rg = self.rg(q) || self.rg(p);
        self.push("neg_sq_dist", vec![a, b], out, Op::NegSqDist { q, p }, rg)
    }

    /// Per-group row means: `out[g] = mean{x_r : groups[r] == g}`.
    pub fn group_mean(&mut self, x: Var, groups: &[usize], n_groups: usize) -> Result<Var> {
        let (r, d) = rows_cols("group_mean", self.shape(x))?;
        if groups.len() != r {
            return Err(shape_err("group_mean", self.shape(x), &[groups.len()]));
        }
        let mut counts = vec![0usize; n_groups];
        for &g in groups {
            if g >= n_groups {
                return Err(Error::invalid(format!(
                    "group_mean: group {g} out of range 0..{n_groups}"
                )));
            }
            counts[g] += 1;
        }
        if let Some(empty) = counts.iter().position(|&c| c == 0) {
            return Err(Error::invalid(format!(
                "group_mean: class {empty} has no support examples"
            )));
        }
        let xd = self.data(x);
        let mut out = vec![0.0; n_groups * d];
        for (row, &g) in groups.iter().enumerate() {
            let inv = 1.0 / counts[g] as f64;
            for k in 0..d {
                out[g * d + k] += xd[row * d + k] * inv;
            }
        }
        let rg = self.rg(x);
        self.push(
            "group_mean",
            vec![n_groups, d],
            out,
            Op::GroupMean {
                x,
                groups: groups.to_vec(),
                counts,
            },
            rg,
        )
    }

    /// Divides each row by its sum (plus a tiny guard against empty rows).
    pub fn row_normalize(&mut self, x: Var) -> Result<Var> {
        let (r, c) = rows_cols("row_normalize", self.shape(x))?;
        let xd = self.data(x);
        let sums: Vec<f64> = (0..r)
            .map(|i| xd[i * c..(i + 1) * c].iter().sum::<f64>() + NORM_EPS)
            .collect();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[i * c + j] = xd[i * c + j] / sums[i];
            }
        }
        let rg = self.rg(x);
        self.push("row_normalize", vec![r, c], out, Op::RowNormalize { x, sums }, rg)
    }

    /// Scales each row to unit Euclidean norm.
    pub fn l2_normalize_rows(&mut self, x: Var) -> Result<Var> {
        let (r, c) = rows_cols("l2_normalize_rows", self.shape(x))?;
        let xd = self.data(x);
        let norms: Vec<f64> = (0..r)
            .map(|i| (xd[i * c..(i + 1) * c].iter().map(|v| v * v).sum::<f64>() + NORM_EPS).sqrt())
            .collect();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[i * c + j] = xd[i * c + j] / norms[i];
            }
        }
        let rg = self.rg(x);
        self.push(
            "l2_normalize_rows",
            vec![r, c],
            out,
            Op::L2NormalizeRows { x, norms },
            rg,
        )
    }

    // ---------------------------------------------------------------- backward

    /// Clears gradients so `backward` may run again.
    pub fn reset(&mut self) {
        for n in &mut self.nodes {
            n.value.set_grad(None);
        }
        self.backward_done = false;
    }

    /// Populates `grad` on every trainable value reachable from `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::BackwardTwice);
        }
        let lv = self.value(loss);
        if lv.numel() != 1 || lv.ndim() > 1 {
            return Err(Error::invalid(format!(
                "backward: loss must be a scalar, got shape {:?}",
                lv.shape()
            )));
        }
        check_finite("backward", lv.data())?;
        self.backward_done = true;

        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        if self.rg(loss) {
            grads[loss.0] = Some(vec![1.0]);
        }
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.backprop(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        for (node, g) in self.nodes.iter_mut().zip(grads) {
            if node.value.requires_grad() {
                node.value.set_grad(g);
            }
        }
        Ok(())
    }

    fn backprop(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let out = node.value.data();
        // Adds into the gradient buffer of `v` if it participates in differentiation.
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !self.rg(v) {
                return;
            }
            let buf = grads[v.0].get_or_insert_with(|| vec![0.0; self.value(v).numel()]);
            f(buf);
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b } => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[1];
                let (ad, bd) = (self.data(*a), self.data(*b));
                acc(*a, &mut |buf| gemm(m, n, k, g, false, bd, true, 1.0, buf));
                acc(*b, &mut |buf| gemm(k, m, n, ad, true, g, false, 1.0, buf));
            }
            Op::Linear { x, w, b } => {
                let (batch, fan_in) = (self.shape(*x)[0], self.shape(*x)[1]);
                let fan_out = self.shape(*w)[0];
                let (xd, wd) = (self.data(*x), self.data(*w));
                acc(*x, &mut |buf| {
                    gemm(batch, fan_out, fan_in, g, false, wd, false, 1.0, buf)
                });
                acc(*w, &mut |buf| {
                    gemm(fan_out, batch, fan_in, g, true, xd, false, 1.0, buf)
                });
                if let Some(b) = b {
                    acc(*b, &mut |buf| {
                        for row in g.chunks_exact(fan_out) {
                            buf.iter_mut().zip(row).for_each(|(a, v)| *a += v);
                        }
                    });
                }
            }
            Op::Conv2d { x, w, b, stride, pad } => {
                let xs = self.shape(*x);
                let ws = self.shape(*w);
                let (n, c, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
                let (oc, kh, kw) = (ws[0], ws[2], ws[3]);
                let geo = ConvGeom::new(c, h, wd, kh, kw, *stride, *pad);
                let p = geo.oh * geo.ow;
                let ckk = c * kh * kw;
                let xdat = self.data(*x);
                let wdat = self.data(*w);
                let mut cols = vec![0.0; ckk * p];
                let need_w = self.rg(*w);
                let need_x = self.rg(*x);
                if need_w {
                    acc(*w, &mut |buf| {
                        for i in 0..n {
                            geo.im2col(&xdat[i * c * h * wd..(i + 1) * c * h * wd], &mut cols);
                            gemm(
                                oc,
                                p,
                                ckk,
                                &g[i * oc * p..(i + 1) * oc * p],
                                false,
                                &cols,
                                true,
                                1.0,
                                buf,
                            );
                        }
                    });
                }
                if need_x {
                    acc(*x, &mut |buf| {
                        for i in 0..n {
                            gemm(
                                ckk,
                                oc,
                                p,
                                wdat,
                                true,
                                &g[i * oc * p..(i + 1) * oc * p],
                                false,
                                0.0,
                                &mut cols,
                            );
                            geo.col2im_add(&cols, &mut buf[i * c * h * wd..(i + 1) * c * h * wd]);
                        }
                    });
                }
                if let Some(b) = b {
                    acc(*b, &mut |buf| {
                        for i in 0..n {
                            for o in 0..oc {
                                let base = (i * oc + o) * p;
                                buf[o] += g[base..base + p].iter().sum::<f64>();
                            }
                        }
                    });
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
            } => {
                let xs = self.shape(*x);
                let (n, c) = (xs[0], xs[1]);
                let s: usize = xs[2..].iter().product();
                let m = (n * s) as f64;
                let mut sum_g = vec![0.0; c];
                let mut sum_gx = vec![0.0; c];
                for i in 0..n {
                    for ch in 0..c {
                        let base = (i * c + ch) * s;
                        for j in base..base + s {
                            sum_g[ch] += g[j];
                            sum_gx[ch] += g[j] * xhat[j];
                        }
                    }
                }
                acc(*beta, &mut |buf| buf.iter_mut().zip(&sum_g).for_each(|(a, v)| *a += v));
                acc(*gamma, &mut |buf| {
                    buf.iter_mut().zip(&sum_gx).for_each(|(a, v)| *a += v)
                });
                let gm = self.data(*gamma);
                acc(*x, &mut |buf| {
                    for i in 0..n {
                        for ch in 0..c {
                            let base = (i * c + ch) * s;
                            let k = gm[ch] * inv_std[ch];
                            for j in base..base + s {
                                buf[j] += if *train {
                                    k * (g[j] - sum_g[ch] / m - xhat[j] * sum_gx[ch] / m)
                                } else {
                                    k * g[j]
                                };
                            }
                        }
                    }
                });
            }
            Op::Relu { x } => {
                let xd = self.data(*x);
                acc(*x, &mut |buf| {
                    for ((a, v), gi) in buf.iter_mut().zip(xd).zip(g) {
                        if *v > 0.0 {
                            *a += gi;
                        }
                    }
                });
            }
            Op::MeanPool { x } => {
                let xs = self.shape(*x);
                let (h, w) = (xs[2], xs[3]);
                let (oh, ow) = (h / 2, w / 2);
                let planes = xs[0] * xs[1];
                acc(*x, &mut |buf| {
                    for plane in 0..planes {
                        let dst = &mut buf[plane * h * w..(plane + 1) * h * w];
                        let src = &g[plane * oh * ow..(plane + 1) * oh * ow];
                        for i in 0..oh {
                            for j in 0..ow {
                                let v = 0.25 * src[i * ow + j];
                                dst[2 * i * w + 2 * j] += v;
                                dst[2 * i * w + 2 * j + 1] += v;
                                dst[(2 * i + 1) * w + 2 * j] += v;
                                dst[(2 * i + 1) * w + 2 * j + 1] += v;
                            }
                        }
                    }
                });
            }
            Op::Add { a, b } => {
                acc(*a, &mut |buf| add_into(buf, g));
                acc(*b, &mut |buf| add_into(buf, g));
            }
            Op::Sub { a, b } => {
                acc(*a, &mut |buf| add_into(buf, g));
                acc(*b, &mut |buf| buf.iter_mut().zip(g).for_each(|(x, v)| *x -= v));
            }
            Op::Mul { a, b } => {
                let (ad, bd) = (self.data(*a), self.data(*b));
                acc(*a, &mut |buf| {
                    for ((x, gi), y) in buf.iter_mut().zip(g).zip(bd) {
                        *x += gi * y;
                    }
                });
                acc(*b, &mut |buf| {
                    for ((x, gi), y) in buf.iter_mut().zip(g).zip(ad) {
                        *x += gi * y;
                    }
                });
            }
            Op::Scale { x, c } => acc(*x, &mut |buf| buf.iter_mut().zip(g).for_each(|(a, v)| *a += c * v)),
            Op::Concat { parts } => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.value(p).numel();
                    acc(p, &mut |buf| add_into(buf, &g[offset..offset + len]));
                    offset += len;
                }
            }
            Op::SliceRows { x, start } => {
                let row: usize = self.shape(*x)[1..].iter().product();
                let off = start * row;
                acc(*x, &mut |buf| add_into(&mut buf[off..off + g.len()], g));
            }
            Op::Reshape { x } => acc(*x, &mut |buf| add_into(buf, g)),
            Op::Transpose { x } => {
                let (r, c) = (self.shape(*x)[0], self.shape(*x)[1]);
                acc(*x, &mut |buf| {
                    for i in 0..r {
                        for j in 0..c {
                            buf[i * c + j] += g[j * r + i];
                        }
                    }
                });
            }
            Op::Softmax { x } => {
                let c = self.shape(*x)[1];
                acc(*x, &mut |buf| {
                    for ((brow, grow), yrow) in buf.chunks_exact_mut(c).zip(g.chunks_exact(c)).zip(out.chunks_exact(c))
                    {
                        let dot: f64 = grow.iter().zip(yrow).map(|(a, b)| a * b).sum();
                        for j in 0..c {
                            brow[j] += yrow[j] * (grow[j] - dot);
                        }
                    }
                });
            }
            Op::LogSoftmax { x } => {
                let c = self.shape(*x)[1];
                acc(*x, &mut |buf| {
                    for ((brow, grow), yrow) in buf.chunks_exact_mut(c).zip(g.chunks_exact(c)).zip(out.chunks_exact(c))
                    {
                        let gs: f64 = grow.iter().sum();
                        for j in 0..c {
                            brow[j] += grow[j] - yrow[j].exp() * gs;
                        }
                    }
                });
            }
            Op::CrossEntropy { logits, labels, probs } => {
                let c = self.shape(*logits)[1];
                let k = g[0] / labels.len() as f64;
                acc(*logits, &mut |buf| {
                    for (i, &l) in labels.iter().enumerate() {
                        for j in 0..c {
                            let onehot = if j == l { 1.0 } else { 0.0 };
                            buf[i * c + j] += k * (probs[i * c + j] - onehot);
                        }
                    }
                });
            }
            Op::KlDiv { p, q } => {
                let r = self.shape(*p)[0] as f64;
                let (pd, qd) = (self.data(*p), self.data(*q));
                let k = g[0] / r;
                acc(*p, &mut |buf| {
                    for ((b, a), c) in buf.iter_mut().zip(pd).zip(qd) {
                        *b += k * (a.ln() - c.ln() + 1.0);
                    }
                });
                acc(*q, &mut |buf| {
                    for ((b, a), c) in buf.iter_mut().zip(pd).zip(qd) {
                        *b -= k * a / c;
                    }
                });
            }
            Op::Reparam { mean, logvar, noise } => {
                let (lv, e) = (self.data(*logvar), self.data(*noise));
                acc(*mean, &mut |buf| add_into(buf, g));
                acc(*logvar, &mut |buf| {
                    for (((b, gi), l), n) in buf.iter_mut().zip(g).zip(lv).zip(e) {
                        *b += gi * n * 0.5 * (0.5 * l).exp();
                    }
                });
                acc(*noise, &mut |buf| {
                    for ((b, gi), l) in buf.iter_mut().zip(g).zip(lv) {
                        *b += gi * (0.5 * l).exp();
                    }
                });
            }
            Op::Sum { x } => acc(*x, &mut |buf| buf.iter_mut().for_each(|a| *a += g[0])),
            Op::Mean { x } => {
                let k = g[0] / self.value(*x).numel() as f64;
                acc(*x, &mut |buf| buf.iter_mut().for_each(|a| *a += k));
            }
            Op::NegSqDist { q, p } => {
                let (a, d) = (self.shape(*q)[0], self.shape(*q)[1]);
                let b = self.shape(*p)[0];
                let (qd, pd) = (self.data(*q), self.data(*p));
                acc(*q, &mut |buf| {
                    for i in 0..a {
                        for j in 0..b {
                            let gij = g[i * b + j];
                            if gij == 0.0 {
                                continue;
                            }
                            for k in 0..d {
                                buf[i * d + k] -= 2.0 * gij * (qd[i * d + k] - pd[j * d + k]);
                            }
                        }
                    }
                });
                acc(*p, &mut |buf| {
                    for i in 0..a {
                        for j in 0..b {
                            let gij = g[i * b + j];
                            if gij == 0.0 {
                                continue;
                            }
                            for k in 0..d {
                                buf[j * d + k] += 2.0 * gij * (qd[i * d + k] - pd[j * d + k]);
                            }
                        }
                    }
                });
            }
            Op::GroupMean { x, groups, counts } => {
                let d = self.shape(*x)[1];
                acc(*x, &mut |buf| {
                    for (row, &grp) in groups.iter().enumerate() {
                        let inv = 1.0 / counts[grp] as f64;
                        for k in 0..d {
                            buf[row * d + k] += g[grp * d + k] * inv;
                        }
                    }
                });
            }
            Op::RowNormalize { x, sums } => {
                let c = self.shape(*x)[1];
                acc(*x, &mut |buf| {
                    for (i, s) in sums.iter().enumerate() {
                        let grow = &g[i * c..(i + 1) * c];
                        let yrow = &out[i * c..(i + 1) * c];
                        let dot: f64 = grow.iter().zip(yrow).map(|(a, b)| a * b).sum();
                        for j in 0..c {
                            buf[i * c + j] += (grow[j] - dot) / s;
                        }
                    }
                });
            }
            Op::L2NormalizeRows { x, norms } => {
                let c = self.shape(*x)[1];
                acc(*x, &mut |buf| {
                    for (i, nrm) in norms.iter().enumerate() {
                        let grow = &g[i * c..(i + 1) * c];
                        let yrow = &out[i * c..(i + 1) * c];
                        let dot: f64 = grow.iter().zip(yrow).map(|(a, b)| a * b).sum();
                        for j in 0..c {
                            buf[i * c + j] += (grow[j] - yrow[j] * dot) / nrm;
                        }
                    }
                });
            }
        }
    }
}

fn add_into(buf: &mut [f64], g: &[f64]) {
    buf.iter_mut().zip(g).for_each(|(a, b)| *a += b);
}

fn log_sum_exp(row: &[f64]) -> f64 {
    let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    mx + row.iter().map(|v| (v - mx).exp()).sum::<f64>().ln()
}

pub(crate) fn softmax_rows(x: &[f64], r: usize, c: usize) -> Vec<f64> {
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        let row = &x[i * c..(i + 1) * c];
        let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for j in 0..c {
            let e = (row[j] - mx).exp();
            out[i * c + j] = e;
            z += e;
        }
        out[i * c..(i + 1) * c].iter_mut().for_each(|v| *v /= z);
    }
    out
}

#[derive(Clone, Copy)]
struct ConvGeom {
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
}

impl ConvGeom {
    fn new(c: usize, h: usize, w: usize, kh: usize, kw: usize, stride: usize, pad: usize) -> Self {
        let oh = (h + 2 * pad - kh) / stride + 1;
        let ow = (w + 2 * pad - kw) / stride + 1;
        ConvGeom {
            c,
            h,
            w,
            kh,
            kw,
            stride,
            pad,
            oh,
            ow,
        }
    }

    /// Unfolds one `C×H×W` image into a `(C·KH·KW) × (OH·OW)` matrix.
    fn im2col(&self, img: &[f64], cols: &mut [f64]) {
        let p = self.oh * self.ow;
        for ch in 0..self.c {
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let row = ((ch * self.kh + ki) * self.kw + kj) * p;
                    for oy in 0..self.oh {
                        let iy = (oy * self.stride + ki) as isize - self.pad as isize;
                        let dst = &mut cols[row + oy * self.ow..row + (oy + 1) * self.ow];
                        if iy < 0 || iy >= self.h as isize {
                            dst.iter_mut().for_each(|v| *v = 0.0);
                            continue;
                        }
                        let src = &img[(ch * self.h + iy as usize) * self.w..];
                        for (ox, d) in dst.iter_mut().enumerate() {
                            let ix = (ox * self.stride + kj) as isize - self.pad as isize;
                            *d = if ix < 0 || ix >= self.w as isize {
                                0.0
                            } else {
                                src[ix as usize]
                            };
                        }
                    }
                }
            }
        }
    }

    fn col2im_add(&self, cols: &[f64], img: &mut [f64]) {
        let p = self.oh * self.ow;
        for ch in 0..self.c {
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let row = ((ch * self.kh + ki) * self.kw + kj) * p;
                    for oy in 0..self.oh {
                        let iy = (oy * self.stride + ki) as isize - self.pad as isize;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        let base = (ch * self.h + iy as usize) * self.w;
                        for ox in 0..self.ow {
                            let ix = (ox * self.stride + kj) as isize - self.pad as isize;
                            if ix >= 0 && ix < self.w as isize {
                                img[base + ix as usize] += cols[row + oy * self.ow + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}
