//! Operation-level reverse-mode tape.
//!
//! Each recorded node stores its forward value and the primitive that
//! produced it; [`Tape::backward`] walks the nodes in reverse and applies the
//! hand-written adjoint of every primitive. The primitive set is closed and
//! small: dense algebra, pointwise nonlinearities, batch normalization, and
//! the fused pieces of the concept-bottleneck loss (Cholesky head transform,
//! reparameterized sampling, Bernoulli likelihoods, grouped log-sum-exp,
//! Gumbel bottleneck, softmax cross-entropy, precision penalty).

use nalgebra::DMatrix;

use super::params::{ParamId, ParamStore};
use crate::error::{Error, Result};
use crate::gauss::{self, precision_offdiag_penalty_grad, tri_index, tri_len, PenaltyKind};
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

const BN_EPS: f64 = 1e-5;

#[derive(Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    AddBias(Var, Var),
    Add(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Sigmoid(Var),
    MulConst(Var, Tensor),
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Tensor,
        inv_std: Vec<f64>,
    },
    BatchNormEval {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Tensor,
        inv_std: Vec<f64>,
    },
    SliceCols {
        x: Var,
        start: usize,
    },
    CholeskyFromRaw {
        raw: Var,
        dim: usize,
    },
    Reparam {
        mu: Var,
        chol: Var,
        eps: Tensor,
        samples: usize,
    },
    BceSum {
        logits: Var,
        targets: Tensor,
    },
    GroupLogSumExp {
        x: Var,
        group: usize,
    },
    Gumbel {
        logits: Var,
        relaxed: Tensor,
        tau: f64,
    },
    Softmax(Var),
    GroupMean {
        x: Var,
        group: usize,
    },
    PickNegLog {
        probs: Var,
        labels: Vec<usize>,
    },
    PrecisionPenalty {
        chol: Var,
        dim: usize,
        kind: PenaltyKind,
    },
    Mean(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

/// Per-column statistics of a training-mode batch normalization.
#[derive(Clone, Debug)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    consumed: bool,
}

fn shape_err(op: &str, detail: String) -> Error {
    Error::Config(format!("{op}: {detail}"))
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

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Records a constant; gradients stop here.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn param(&mut self, store: &ParamStore, name: &str) -> Result<Var> {
        let id = store.require(name)?;
        Ok(self.push(store.value(id).clone(), Op::Param(id)))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.cols() != vb.rows() {
            return Err(shape_err(
                "matmul",
                format!("{:?} x {:?}", va.shape(), vb.shape()),
            ));
        }
        let out = va.matmul(vb);
        Ok(self.push(out, Op::MatMul(a, b)))
    }

    /// `a + b` with `b` a `1 × cols` row broadcast over the rows of `a`.
    pub fn add_bias(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if vb.rows() != 1 || vb.cols() != va.cols() {
            return Err(shape_err(
                "add_bias",
                format!("{:?} + {:?}", va.shape(), vb.shape()),
            ));
        }
        let mut out = va.clone();
        for r in 0..out.rows() {
            for (o, bv) in out.row_mut(r).iter_mut().zip(vb.data()) {
                *o += bv;
            }
        }
        Ok(self.push(out, Op::AddBias(a, b)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(shape_err("add", format!("{:?} + {:?}", va.shape(), vb.shape())));
        }
        let out = va.zip_map(vb, |x, y| x + y);
        Ok(self.push(out, Op::Add(a, b)))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let out = self.value(a).map(|x| x * k);
        self.push(out, Op::Scale(a, k))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x.max(0.0));
        self.push(out, Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).map(gauss::sigmoid);
        self.push(out, Op::Sigmoid(a))
    }

    /// Elementwise product with a constant (dropout masks).
    pub fn mul_const(&mut self, a: Var, mask: Tensor) -> Result<Var> {
        let va = self.value(a);
        if va.shape() != mask.shape() {
            return Err(shape_err(
                "mul_const",
                format!("{:?} * {:?}", va.shape(), mask.shape()),
            ));
        }
        let out = va.zip_map(&mask, |x, m| x * m);
        Ok(self.push(out, Op::MulConst(a, mask)))
    }

    /// Training-mode batch normalization over rows; returns the batch statistics
    /// so the caller can update running estimates.
    pub fn batch_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<(Var, BatchStats)> {
        let vx = self.value(x);
        let (n, c) = vx.shape();
        self.check_affine("batch_norm", c, gamma, beta)?;
        if n < 2 {
            return Err(shape_err("batch_norm", format!("needs at least 2 rows, got {n}")));
        }
        let mut mean = vec![0.0; c];
        for r in 0..n {
            for (m, v) in mean.iter_mut().zip(vx.row(r)) {
                *m += v;
            }
        }
        for m in &mut mean {
            *m /= n as f64;
        }
        let mut var = vec![0.0; c];
        for r in 0..n {
            for ((s, v), m) in var.iter_mut().zip(vx.row(r)).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        for s in &mut var {
            *s /= n as f64;
        }
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
        let (xhat, out) = self.normalize(x, gamma, beta, &mean, &inv_std);
        let v = self.push(
            out,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
        );
        Ok((v, BatchStats { mean, var }))
    }

    /// Inference-mode batch normalization with fixed statistics.
    pub fn batch_norm_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &[f64],
        running_var: &[f64],
    ) -> Result<Var> {
        let c = self.value(x).cols();
        self.check_affine("batch_norm_eval", c, gamma, beta)?;
        if running_mean.len() != c || running_var.len() != c {
            return Err(shape_err("batch_norm_eval", "running statistics width".into()));
        }
        let inv_std: Vec<f64> = running_var
            .iter()
            .map(|v| 1.0 / (v + BN_EPS).sqrt())
            .collect();
        let (xhat, out) = self.normalize(x, gamma, beta, running_mean, &inv_std);
        Ok(self.push(
            out,
            Op::BatchNormEval {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
        ))
    }

    fn check_affine(&self, op: &str, c: usize, gamma: Var, beta: Var) -> Result<()> {
        let (g, b) = (self.value(gamma), self.value(beta));
        if g.shape() != (1, c) || b.shape() != (1, c) {
            return Err(shape_err(
                op,
                format!("affine shapes {:?}/{:?} for width {c}", g.shape(), b.shape()),
            ));
        }
        Ok(())
    }

    fn normalize(
        &self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: &[f64],
        inv_std: &[f64],
    ) -> (Tensor, Tensor) {
        let vx = self.value(x);
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let (n, c) = vx.shape();
        let mut xhat = Tensor::zeros(n, c);
        let mut out = Tensor::zeros(n, c);
        for r in 0..n {
            for j in 0..c {
                let h = (vx.get(r, j) - mean[j]) * inv_std[j];
                xhat.set(r, j, h);
                out.set(r, j, g[j] * h + b[j]);
            }
        }
        (xhat, out)
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, width: usize) -> Result<Var> {
        let vx = self.value(x);
        if start + width > vx.cols() {
            return Err(shape_err(
                "slice_cols",
                format!("{start}..{} of {} columns", start + width, vx.cols()),
            ));
        }
        let mut out = Tensor::zeros(vx.rows(), width);
        for r in 0..vx.rows() {
            out.row_mut(r).copy_from_slice(&vx.row(r)[start..start + width]);
        }
        Ok(self.push(out, Op::SliceCols { x, start }))
    }

    /// Maps each row of packed raw parameters to a flattened (row-major)
    /// `dim × dim` Cholesky factor.
    pub fn cholesky_from_raw(&mut self, raw: Var, dim: usize) -> Result<Var> {
        let vr = self.value(raw);
        if vr.cols() != tri_len(dim) {
            return Err(shape_err(
                "cholesky_from_raw",
                format!("{} raw columns for dimension {dim}", vr.cols()),
            ));
        }
        let mut out = Tensor::zeros(vr.rows(), dim * dim);
        for r in 0..vr.rows() {
            let l = gauss::build_cholesky(vr.row(r))?;
            let row = out.row_mut(r);
            for i in 0..dim {
                for j in 0..=i {
                    row[i * dim + j] = l[(i, j)];
                }
            }
        }
        Ok(self.push(out, Op::CholeskyFromRaw { raw, dim }))
    }

    /// `η[r·S + m] = μ[r] + L_r · ε[r·S + m]` for `S = samples`.
    ///
    /// `chol` holds one flattened factor per row of `mu`, or a single shared
    /// factor.
    pub fn reparam(&mut self, mu: Var, chol: Var, eps: Tensor, samples: usize) -> Result<Var> {
        let (vm, vl) = (self.value(mu), self.value(chol));
        let (rows, dim) = vm.shape();
        if vl.cols() != dim * dim || (vl.rows() != rows && vl.rows() != 1) {
            return Err(shape_err(
                "reparam",
                format!("factor {:?} for means {:?}", vl.shape(), vm.shape()),
            ));
        }
        if eps.shape() != (rows * samples, dim) {
            return Err(shape_err(
                "reparam",
                format!("noise {:?}, expected {:?}", eps.shape(), (rows * samples, dim)),
            ));
        }
        let mut out = Tensor::zeros(rows * samples, dim);
        for r in 0..rows {
            let l = vl.row(if vl.rows() == 1 { 0 } else { r });
            let m = vm.row(r);
            for s in 0..samples {
                let e = eps.row(r * samples + s);
                let o = out.row_mut(r * samples + s);
                for i in 0..dim {
                    let li = &l[i * dim..i * dim + i + 1];
                    let acc: f64 = li.iter().zip(e).map(|(a, b)| a * b).sum();
                    o[i] = m[i] + acc;
                }
            }
        }
        Ok(self.push(
            out,
            Op::Reparam {
                mu,
                chol,
                eps,
                samples,
            },
        ))
    }

    /// Row sums of binary cross-entropy `BCE(c, σ(z))` computed from logits.
    pub fn bce_sum(&mut self, logits: Var, targets: Tensor) -> Result<Var> {
        let vz = self.value(logits);
        if vz.shape() != targets.shape() {
            return Err(shape_err(
                "bce_sum",
                format!("{:?} vs targets {:?}", vz.shape(), targets.shape()),
            ));
        }
        let mut out = Tensor::zeros(vz.rows(), 1);
        for r in 0..vz.rows() {
            let s: f64 = vz
                .row(r)
                .iter()
                .zip(targets.row(r))
                .map(|(&z, &c)| bce_with_logit(c, z))
                .sum();
            out.set(r, 0, s);
        }
        Ok(self.push(out, Op::BceSum { logits, targets }))
    }

    /// Log-sum-exp over consecutive groups of `group` rows of a column vector.
    pub fn group_logsumexp(&mut self, x: Var, group: usize) -> Result<Var> {
        let vx = self.value(x);
        if vx.cols() != 1 || group == 0 || !vx.rows().is_multiple_of(group) {
            return Err(shape_err(
                "group_logsumexp",
                format!("{:?} in groups of {group}", vx.shape()),
            ));
        }
        let out = Tensor::from_vec(
            vx.rows() / group,
            1,
            vx.data().chunks(group).map(logsumexp).collect(),
        );
        Ok(self.push(out, Op::GroupLogSumExp { x, group }))
    }

    /// Binary Gumbel-Softmax sample at temperature `tau` from logits and
    /// uniform noise `u ∈ (0,1)`.
    ///
    /// The relaxed value is `σ((z + ln u − ln(1−u)) / τ)`. With
    /// `straight_through` the forward value is that relaxed value thresholded
    /// at 0.5; the backward pass always uses the relaxed Jacobian.
    pub fn gumbel_binary(
        &mut self,
        logits: Var,
        uniforms: &Tensor,
        tau: f64,
        straight_through: bool,
    ) -> Result<Var> {
        let vz = self.value(logits);
        if vz.shape() != uniforms.shape() {
            return Err(shape_err(
                "gumbel_binary",
                format!("{:?} vs noise {:?}", vz.shape(), uniforms.shape()),
            ));
        }
        if !(tau > 0.0) {
            return Err(Error::Config(format!("Gumbel temperature must be > 0, got {tau}")));
        }
        let relaxed = vz.zip_map(uniforms, |z, u| gauss::sigmoid((z + logistic(u)) / tau));
        let out = if straight_through {
            relaxed.map(|p| if p >= 0.5 { 1.0 } else { 0.0 })
        } else {
            relaxed.clone()
        };
        Ok(self.push(
            out,
            Op::Gumbel {
                logits,
                relaxed,
                tau,
            },
        ))
    }

    pub fn softmax(&mut self, x: Var) -> Var {
        let vx = self.value(x);
        let mut out = vx.clone();
        for r in 0..out.rows() {
            softmax_in_place(out.row_mut(r));
        }
        self.push(out, Op::Softmax(x))
    }

    /// Mean over consecutive groups of `group` rows.
    pub fn group_mean(&mut self, x: Var, group: usize) -> Result<Var> {
        let vx = self.value(x);
        if group == 0 || !vx.rows().is_multiple_of(group) {
            return Err(shape_err(
                "group_mean",
                format!("{:?} in groups of {group}", vx.shape()),
            ));
        }
        let n = vx.rows() / group;
        let mut out = Tensor::zeros(n, vx.cols());
        for g in 0..n {
            for s in 0..group {
                for (o, v) in out.row_mut(g).iter_mut().zip(vx.row(g * group + s)) {
                    *o += v;
                }
            }
            for o in out.row_mut(g) {
                *o /= group as f64;
            }
        }
        Ok(self.push(out, Op::GroupMean { x, group }))
    }

    /// `−ln p[r, labels[r]]` per row.
    pub fn pick_neg_log(&mut self, probs: Var, labels: Vec<usize>) -> Result<Var> {
        let vp = self.value(probs);
        if labels.len() != vp.rows() || labels.iter().any(|&l| l >= vp.cols()) {
            return Err(shape_err(
                "pick_neg_log",
                format!("{} labels for {:?}", labels.len(), vp.shape()),
            ));
        }
        let out = Tensor::from_vec(
            vp.rows(),
            1,
            labels
                .iter()
                .enumerate()
                .map(|(r, &l)| -vp.get(r, l).ln())
                .collect(),
        );
        Ok(self.push(out, Op::PickNegLog { probs, labels }))
    }

    /// Off-diagonal precision sum for each flattened Cholesky factor row.
    pub fn precision_penalty(&mut self, chol: Var, dim: usize, kind: PenaltyKind) -> Result<Var> {
        let vl = self.value(chol);
        if vl.cols() != dim * dim {
            return Err(shape_err(
                "precision_penalty",
                format!("{} columns for dimension {dim}", vl.cols()),
            ));
        }
        let mut out = Tensor::zeros(vl.rows(), 1);
        for r in 0..vl.rows() {
            let l = DMatrix::from_row_slice(dim, dim, vl.row(r));
            out.set(r, 0, gauss::precision_offdiag_penalty(&l, kind));
        }
        Ok(self.push(out, Op::PrecisionPenalty { chol, dim, kind }))
    }

    /// Mean of all entries, as a `1 × 1` tensor.
    pub fn mean(&mut self, x: Var) -> Var {
        let vx = self.value(x);
        let m = vx.sum() / vx.len() as f64;
        self.push(Tensor::from_vec(1, 1, vec![m]), Op::Mean(x))
    }

    /// Backpropagates a unit seed from a `1 × 1` output.
    pub fn backward(&mut self, output: Var, store: &ParamStore) -> Result<ParamStore> {
        let (r, c) = self.value(output).shape();
        self.backward_with(output, Tensor::filled(r, c, 1.0), store)
    }

    /// Backpropagates `seed = ∂loss/∂output` and returns gradients for every
    /// parameter in `store` (zero for parameters absent from the tape).
    ///
    /// A tape can be differentiated once; a second call is a usage error.
    pub fn backward_with(
        &mut self,
        output: Var,
        seed: Tensor,
        store: &ParamStore,
    ) -> Result<ParamStore> {
        if self.consumed {
            return Err(Error::Usage("tape has already been consumed by backward".into()));
        }
        self.consumed = true;
        if seed.shape() != self.value(output).shape() {
            return Err(shape_err(
                "backward",
                format!("seed {:?} for output {:?}", seed.shape(), self.value(output).shape()),
            ));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; output.0 + 1];
        grads[output.0] = Some(seed);
        let mut out = store.zeros_like();

        for idx in (0..=output.0).rev() {
            let Some(g) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Leaf => {}
                Op::Param(id) => out.value_mut(*id).add_assign(&g),
                Op::MatMul(a, b) => {
                    let da = g.matmul_t(self.value(*b));
                    let db = self.value(*a).t_matmul(&g);
                    accumulate(&mut grads, *a, da);
                    accumulate(&mut grads, *b, db);
                }
                Op::AddBias(a, b) => {
                    let db = g.sum_rows();
                    accumulate(&mut grads, *b, db);
                    accumulate(&mut grads, *a, g);
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, g.clone());
                    accumulate(&mut grads, *b, g);
                }
                Op::Scale(a, k) => accumulate(&mut grads, *a, g.map(|v| v * k)),
                Op::Relu(a) => {
                    let d = g.zip_map(&node.value, |gv, y| if y > 0.0 { gv } else { 0.0 });
                    accumulate(&mut grads, *a, d);
                }
                Op::Sigmoid(a) => {
                    let d = g.zip_map(&node.value, |gv, s| gv * s * (1.0 - s));
                    accumulate(&mut grads, *a, d);
                }
                Op::MulConst(a, mask) => accumulate(&mut grads, *a, g.zip_map(mask, |x, m| x * m)),
                Op::BatchNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    inv_std,
                } => {
                    let gam = self.value(*gamma).data().to_vec();
                    let (n, c) = g.shape();
                    let nf = n as f64;
                    let mut dgamma = vec![0.0; c];
                    let mut dbeta = vec![0.0; c];
                    let mut sum_dxhat = vec![0.0; c];
                    let mut sum_dxhat_xhat = vec![0.0; c];
                    for r in 0..n {
                        for j in 0..c {
                            let gv = g.get(r, j);
                            let h = xhat.get(r, j);
                            dgamma[j] += gv * h;
                            dbeta[j] += gv;
                            let dh = gv * gam[j];
                            sum_dxhat[j] += dh;
                            sum_dxhat_xhat[j] += dh * h;
                        }
                    }
                    let mut dx = Tensor::zeros(n, c);
                    for r in 0..n {
                        for j in 0..c {
                            let dh = g.get(r, j) * gam[j];
                            let v = inv_std[j] / nf
                                * (nf * dh - sum_dxhat[j] - xhat.get(r, j) * sum_dxhat_xhat[j]);
                            dx.set(r, j, v);
                        }
                    }
                    accumulate(&mut grads, *x, dx);
                    accumulate(&mut grads, *gamma, Tensor::row_vector(dgamma));
                    accumulate(&mut grads, *beta, Tensor::row_vector(dbeta));
                }
                Op::BatchNormEval {
                    x,
                    gamma,
                    beta,
                    xhat,
                    inv_std,
                } => {
                    let gam = self.value(*gamma).data().to_vec();
                    let (n, c) = g.shape();
                    let mut dx = Tensor::zeros(n, c);
                    let mut dgamma = vec![0.0; c];
                    let mut dbeta = vec![0.0; c];
                    for r in 0..n {
                        for j in 0..c {
                            let gv = g.get(r, j);
                            dx.set(r, j, gv * gam[j] * inv_std[j]);
                            dgamma[j] += gv * xhat.get(r, j);
                            dbeta[j] += gv;
                        }
                    }
                    accumulate(&mut grads, *x, dx);
                    accumulate(&mut grads, *gamma, Tensor::row_vector(dgamma));
                    accumulate(&mut grads, *beta, Tensor::row_vector(dbeta));
                }
                Op::SliceCols { x, start } => {
                    let vx = self.value(*x);
                    let mut dx = Tensor::zeros(vx.rows(), vx.cols());
                    let w = g.cols();
                    for r in 0..g.rows() {
                        dx.row_mut(r)[*start..*start + w].copy_from_slice(g.row(r));
                    }
                    accumulate(&mut grads, *x, dx);
                }
                Op::CholeskyFromRaw { raw, dim } => {
                    let vr = self.value(*raw);
                    let mut dr = Tensor::zeros(vr.rows(), vr.cols());
                    for r in 0..vr.rows() {
                        let gl = g.row(r);
                        let raw_row = vr.row(r);
                        let out_row = dr.row_mut(r);
                        for i in 0..*dim {
                            for j in 0..i {
                                out_row[tri_index(i, j)] = gl[i * dim + j];
                            }
                            let k = tri_index(i, i);
                            out_row[k] = gl[i * dim + i] * gauss::sigmoid(raw_row[k]);
                        }
                    }
                    accumulate(&mut grads, *raw, dr);
                }
                Op::Reparam {
                    mu,
                    chol,
                    eps,
                    samples,
                } => {
                    let vl = self.value(*chol);
                    let (rows, dim) = self.value(*mu).shape();
                    let mut dmu = Tensor::zeros(rows, dim);
                    let mut dl = Tensor::zeros(vl.rows(), vl.cols());
                    for r in 0..rows {
                        let lr = if vl.rows() == 1 { 0 } else { r };
                        for s in 0..*samples {
                            let gr = g.row(r * samples + s);
                            let e = eps.row(r * samples + s);
                            for (d, gv) in dmu.row_mut(r).iter_mut().zip(gr) {
                                *d += gv;
                            }
                            let dlr = dl.row_mut(lr);
                            for i in 0..dim {
                                let gi = gr[i];
                                for j in 0..=i {
                                    dlr[i * dim + j] += gi * e[j];
                                }
                            }
                        }
                    }
                    accumulate(&mut grads, *mu, dmu);
                    accumulate(&mut grads, *chol, dl);
                }
                Op::BceSum { logits, targets } => {
                    let vz = self.value(*logits);
                    let mut dz = Tensor::zeros(vz.rows(), vz.cols());
                    for r in 0..vz.rows() {
                        let gr = g.get(r, 0);
                        for ((d, &z), &c) in dz
                            .row_mut(r)
                            .iter_mut()
                            .zip(vz.row(r))
                            .zip(targets.row(r))
                        {
                            *d = gr * (gauss::sigmoid(z) - c);
                        }
                    }
                    accumulate(&mut grads, *logits, dz);
                }
                Op::GroupLogSumExp { x, group } => {
                    let vx = self.value(*x);
                    let mut dx = Tensor::zeros(vx.rows(), 1);
                    for (gi, chunk) in vx.data().chunks(*group).enumerate() {
                        let lse = node.value.get(gi, 0);
                        let gv = g.get(gi, 0);
                        for (s, v) in chunk.iter().enumerate() {
                            dx.set(gi * group + s, 0, gv * (v - lse).exp());
                        }
                    }
                    accumulate(&mut grads, *x, dx);
                }
                Op::Gumbel {
                    logits,
                    relaxed,
                    tau,
                } => {
                    let d = g.zip_map(relaxed, |gv, p| gv * p * (1.0 - p) / tau);
                    accumulate(&mut grads, *logits, d);
                }
                Op::Softmax(x) => {
                    let p = &node.value;
                    let mut dx = Tensor::zeros(p.rows(), p.cols());
                    for r in 0..p.rows() {
                        let dot: f64 = g.row(r).iter().zip(p.row(r)).map(|(a, b)| a * b).sum();
                        for ((d, gv), pv) in dx.row_mut(r).iter_mut().zip(g.row(r)).zip(p.row(r)) {
                            *d = pv * (gv - dot);
                        }
                    }
                    accumulate(&mut grads, *x, dx);
                }
                Op::GroupMean { x, group } => {
                    let vx = self.value(*x);
                    let mut dx = Tensor::zeros(vx.rows(), vx.cols());
                    for r in 0..vx.rows() {
                        let src = g.row(r / group);
                        for (d, s) in dx.row_mut(r).iter_mut().zip(src) {
                            *d = s / *group as f64;
                        }
                    }
                    accumulate(&mut grads, *x, dx);
                }
                Op::PickNegLog { probs, labels } => {
                    let vp = self.value(*probs);
                    let mut dp = Tensor::zeros(vp.rows(), vp.cols());
                    for (r, &l) in labels.iter().enumerate() {
                        dp.set(r, l, -g.get(r, 0) / vp.get(r, l));
                    }
                    accumulate(&mut grads, *probs, dp);
                }
                Op::PrecisionPenalty { chol, dim, kind } => {
                    let vl = self.value(*chol);
                    let mut dl = Tensor::zeros(vl.rows(), vl.cols());
                    for r in 0..vl.rows() {
                        let l = DMatrix::from_row_slice(*dim, *dim, vl.row(r));
                        let (_, gl) = precision_offdiag_penalty_grad(&l, *kind);
                        let gv = g.get(r, 0);
                        let row = dl.row_mut(r);
                        for i in 0..*dim {
                            for j in 0..=i {
                                row[i * dim + j] = gv * gl[(i, j)];
                            }
                        }
                    }
                    accumulate(&mut grads, *chol, dl);
                }
                Op::Mean(x) => {
                    let vx = self.value(*x);
                    let k = g.get(0, 0) / vx.len() as f64;
                    accumulate(&mut grads, *x, Tensor::filled(vx.rows(), vx.cols(), k));
                }
            }
        }
        Ok(out)
    }
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
    match &mut grads[v.0] {
        Some(acc) => acc.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

/// `BCE(c, σ(z)) = softplus(z) − c·z`, stable for large `|z|`.
#[inline]
pub fn bce_with_logit(c: f64, z: f64) -> f64 {
    gauss::softplus(z) - c * z
}

/// Standard logistic variate from a uniform `u ∈ (0, 1)`.
#[inline]
pub fn logistic(u: f64) -> f64 {
    u.ln() - (-u).ln_1p()
}

pub fn logsumexp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

pub fn softmax_in_place(row: &mut [f64]) {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for v in row.iter_mut() {
        *v = (*v - m).exp();
        s += *v;
    }
    for v in row.iter_mut() {
        *v /= s;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_has_derivative_six_at_three() {
        let mut store = ParamStore::new();
        store.insert("w", Tensor::from_vec(1, 1, vec![3.0]), true);
        let mut tape = Tape::new();
        let w = tape.param(&store, "w").unwrap();
        let y = tape.matmul(w, w).unwrap();
        assert_eq!(tape.value(y).get(0, 0), 9.0);
        let g = tape.backward(y, &store).unwrap();
        assert_eq!(g.get("w").unwrap().get(0, 0), 6.0);
    }

    #[test]
    fn unused_parameter_gets_exact_zero() {
        let mut store = ParamStore::new();
        store.insert("a", Tensor::from_vec(1, 2, vec![1.0, 2.0]), true);
        store.insert("b", Tensor::from_vec(1, 1, vec![5.0]), true);
        let mut tape = Tape::new();
        let a = tape.param(&store, "a").unwrap();
        let s = tape.relu(a);
        let m = tape.mean(s);
        let g = tape.backward(m, &store).unwrap();
        assert_eq!(g.get("b").unwrap().data(), &[0.0]);
        assert_eq!(g.get("a").unwrap().data(), &[0.5, 0.5]);
    }

    #[test]
    fn consumed_tape_is_a_usage_error() {
        let mut store = ParamStore::new();
        store.insert("a", Tensor::from_vec(1, 1, vec![1.0]), true);
        let mut tape = Tape::new();
        let a = tape.param(&store, "a").unwrap();
        let m = tape.mean(a);
        tape.backward(m, &store).unwrap();
        assert!(matches!(tape.backward(m, &store), Err(Error::Usage(_))));
    }

    #[test]
    fn shape_mismatch_is_a_configuration_error() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(2, 3));
        let b = tape.constant(Tensor::zeros(2, 3));
        assert!(matches!(tape.matmul(a, b), Err(Error::Config(_))));
    }

    #[test]
    fn logsumexp_is_stable() {
        assert!((logsumexp(&[1000.0, 1000.0]) - (1000.0 + 2f64.ln())).abs() < 1e-12);
        assert!((logsumexp(&[-1000.0]) + 1000.0).abs() < 1e-12);
    }
}
