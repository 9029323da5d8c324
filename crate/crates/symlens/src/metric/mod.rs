//! The regularized tangent-kernel metric and metric-weighted gradient
//! influence.
//!
//! For a model with output Jacobian J_x at input x and SMSE weighting
//! W = diag(w_c), the metric operator is
//!
//!   χ v = (1/M) Σ_{x ∈ batch} Jₓᵀ W Jₓ v + λ v,
//!
//! applied matrix-free (JVP then VJP per example, no materialized
//! Jacobians), symmetric positive definite by construction. Influence
//! between transitions is the metric-weighted gradient overlap
//!
//!   I(x → x′) = ∇C_{x′} · χ⁻¹ ∇C_x,
//!
//! reported with the sign convention that positive values mean the update
//! from x decreases the loss at x′. Raw values are standardized by the
//! standard deviation of the off-diagonal same-batch influence matrix, so
//! unity marks unstructured cross-example variability.

pub mod cg;

pub use cg::{cg_solve, CgConfig, LinearOperator, SolveReport};

use crate::autodiff::ParamVector;
use crate::error::Error;
use crate::field::Field;
use crate::loss::SmseWeights;
use crate::models::ModelInstance;
use crate::scalar::Scalar;
use crate::symmetry::{apply, GroupElement};
use crate::tensor::Tensor;
use crate::Result;

/// One supervised one-step transition plus a stable example id for reports.
#[derive(Debug, Clone)]
pub struct Transition<T> {
    pub id: usize,
    pub input: Field<T>,
    pub target: Field<T>,
}

/// Implicit linear map `v ↦ (1/M)·Σ JᵀWJ v + λv` anchored on a mini-batch.
pub struct MetricOperator<'a, T: Scalar> {
    model: &'a ModelInstance<T>,
    inputs: Vec<Tensor<T>>,
    weights: SmseWeights<T>,
    lambda: T,
}

impl<'a, T: Scalar> MetricOperator<'a, T> {
    pub fn new(
        model: &'a ModelInstance<T>,
        batch: &[Transition<T>],
        weights: SmseWeights<T>,
        lambda: T,
    ) -> Result<Self> {
        if !(lambda > T::zero()) {
            return Err(Error::config("metric regularization λ must be positive"));
        }
        let inputs: Vec<Tensor<T>> = batch.iter().map(|t| t.input.to_tensor()).collect();
        for t in &inputs {
            if t.shape() != model.graph.input_shape() {
                return Err(Error::shape(format!(
                    "anchor example shape {:?} does not match model input {:?}",
                    t.shape(),
                    model.graph.input_shape()
                )));
            }
        }
        Ok(MetricOperator {
            model,
            inputs,
            weights,
            lambda,
        })
    }

    pub fn lambda(&self) -> T {
        self.lambda
    }

    pub fn batch_len(&self) -> usize {
        self.inputs.len()
    }

    fn per_channel(&self) -> usize {
        let out_shape = self.model.graph.output_shape();
        out_shape.iter().product::<usize>() / self.weights.channels()
    }

    /// Scale an output-shaped tensor by the SMSE weights `w_c`.
    fn weight_output(&self, t: &mut Tensor<T>) {
        let per = self.per_channel();
        for c in 0..self.weights.channels() {
            let w = self.weights.entry_weight(c, per);
            for v in &mut t.data_mut()[c * per..(c + 1) * per] {
                *v *= w;
            }
        }
    }

    /// Gradient of the SMSE at one transition, as the column vectors of the
    /// influence computation.
    pub fn loss_grad(&self, transition: &Transition<T>) -> Result<ParamVector<T>> {
        let input = transition.input.to_tensor();
        let target = transition.target.to_tensor();
        let pred = self.model.graph.forward(&self.model.params, &input)?;
        let value = self.weights.smse(&pred, &target)?;
        if !value.is_finite() {
            return Err(Error::NonFinite {
                example: Some(transition.id),
            });
        }
        let cot = self.weights.cotangent(&pred, &target)?;
        self.model.graph.vjp_outputs(&self.model.params, &input, &cot)
    }
}

impl<T: Scalar> LinearOperator<T> for MetricOperator<'_, T> {
    fn dim(&self) -> usize {
        self.model.params.len()
    }

    /// One JVP and one VJP per anchor example, accumulated in batch order.
    fn apply(&self, v: &[T], out: &mut [T]) {
        let params = &self.model.params;
        let vp = ParamVector(v.to_vec());
        for (o, vi) in out.iter_mut().zip(v) {
            *o = self.lambda * *vi;
        }
        if self.inputs.is_empty() {
            return;
        }
        let scale = T::one() / T::from_f64(self.inputs.len() as f64);
        for input in &self.inputs {
            let mut jv = self
                .model
                .graph
                .jvp_outputs(params, input, &vp)
                .expect("anchor batch was validated at construction");
            self.weight_output(&mut jv);
            let g = self
                .model
                .graph
                .vjp_outputs(params, input, &jv)
                .expect("anchor batch was validated at construction");
            for (o, gi) in out.iter_mut().zip(g.iter()) {
                *o += scale * *gi;
            }
        }
    }
}

/// Convenience wrapper: χv as a fresh vector.
pub fn metric_vec<T: Scalar>(op: &MetricOperator<'_, T>, v: &ParamVector<T>) -> ParamVector<T> {
    let mut out = vec![T::zero(); op.dim()];
    op.apply(v, &mut out);
    ParamVector(out)
}

/// Standardized influence value for an (example, group element) pair plus
/// solver provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct InfluenceRecord {
    pub example: usize,
    pub element: String,
    pub raw: f64,
    pub standardized: f64,
    pub report: SolveReport,
}

/// The batch influence matrix and everything needed to standardize and
/// reuse it: one CG solve per batch column, cached; the off-diagonal
/// standard deviation as the unit of influence.
pub struct InfluenceContext<'a, T: Scalar> {
    op: MetricOperator<'a, T>,
    batch: Vec<Transition<T>>,
    solves: Vec<(ParamVector<T>, SolveReport)>,
    raw: Vec<Vec<T>>,
    baseline: T,
    cfg: CgConfig,
}

impl<'a, T: Scalar> InfluenceContext<'a, T> {
    /// Build the context: M gradients, M metric solves (sequential, shared
    /// operator), the M×M raw influence matrix, and the standardization
    /// baseline. Fails if the batch is too degenerate to define a baseline.
    pub fn build(
        model: &'a ModelInstance<T>,
        batch: Vec<Transition<T>>,
        weights: SmseWeights<T>,
        lambda: T,
        cfg: CgConfig,
    ) -> Result<Self> {
        if batch.len() < 2 {
            return Err(Error::config(
                "influence standardization needs at least two anchor examples",
            ));
        }
        let op = MetricOperator::new(model, &batch, weights, lambda)?;
        let grads: Vec<ParamVector<T>> = batch
            .iter()
            .map(|t| op.loss_grad(t))
            .collect::<Result<_>>()?;
        let solves: Vec<(ParamVector<T>, SolveReport)> = grads
            .iter()
            .map(|g| {
                let (z, report) = cg_solve(&op, g, &cfg);
                (ParamVector(z), report)
            })
            .collect();
        let m = batch.len();
        let mut raw = vec![vec![T::zero(); m]; m];
        for j in 0..m {
            for i in 0..m {
                raw[i][j] = grads[i].dot(&solves[j].0);
            }
        }
        // population std over off-diagonal entries whose column solve
        // converged
        let mut offdiag: Vec<T> = Vec::with_capacity(m * m - m);
        for j in 0..m {
            if !solves[j].1.converged {
                continue;
            }
            for i in 0..m {
                if i != j {
                    offdiag.push(raw[i][j]);
                }
            }
        }
        if offdiag.is_empty() {
            return Err(Error::degenerate(
                "no converged off-diagonal influence entries; \
                 raise the iteration cap or loosen the tolerance",
            ));
        }
        let count = T::from_f64(offdiag.len() as f64);
        let mean = offdiag.iter().fold(T::zero(), |a, b| a + *b) / count;
        let var = offdiag
            .iter()
            .fold(T::zero(), |a, b| a + (*b - mean) * (*b - mean))
            / count;
        let baseline = var.sqrt();
        if !(baseline > T::zero()) || !baseline.is_finite() {
            return Err(Error::degenerate(
                "influence baseline is zero; the mini-batch is too uniform — \
                 use a larger or more varied batch",
            ));
        }
        Ok(InfluenceContext {
            op,
            batch,
            solves,
            raw,
            baseline,
            cfg,
        })
    }

    pub fn baseline(&self) -> T {
        self.baseline
    }

    pub fn batch(&self) -> &[Transition<T>] {
        &self.batch
    }

    pub fn raw_entry(&self, i: usize, j: usize) -> T {
        self.raw[i][j]
    }

    pub fn column_report(&self, j: usize) -> SolveReport {
        self.solves[j].1
    }

    pub fn nonconverged_columns(&self) -> usize {
        self.solves.iter().filter(|(_, r)| !r.converged).count()
    }

    /// Influence of the update from batch example `col` on its
    /// group-transformed counterpart: `∇C_{g·x} · χ⁻¹ ∇C_x`, reusing the
    /// cached column solve.
    pub fn transform_influence(&self, col: usize, g: GroupElement) -> Result<InfluenceRecord> {
        let t = &self.batch[col];
        let raw = if g.identity_like() {
            self.raw[col][col]
        } else {
            let transformed = Transition {
                id: t.id,
                input: apply(g, &t.input)?,
                target: apply(g, &t.target)?,
            };
            let g_gx = self.op.loss_grad(&transformed)?;
            g_gx.dot(&self.solves[col].0)
        };
        Ok(self.record(t.id, g.name(), raw, self.solves[col].1))
    }

    /// Influence of the update from an arbitrary probe transition on its
    /// transformed counterpart (fresh solve for the probe's gradient).
    pub fn probe_influence(
        &self,
        probe: &Transition<T>,
        g: GroupElement,
    ) -> Result<InfluenceRecord> {
        let g_x = self.op.loss_grad(probe)?;
        let (z, report) = cg_solve(&self.op, &g_x, &self.cfg);
        let z = ParamVector(z);
        let transformed = Transition {
            id: probe.id,
            input: apply(g, &probe.input)?,
            target: apply(g, &probe.target)?,
        };
        let g_gx = self.op.loss_grad(&transformed)?;
        Ok(self.record(probe.id, g.name(), g_gx.dot(&z), report))
    }

    fn record(&self, id: usize, element: String, raw: T, report: SolveReport) -> InfluenceRecord {
        InfluenceRecord {
            example: id,
            element,
            raw: raw.to_f64(),
            standardized: (raw / self.baseline).to_f64(),
            report,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{build, ModelConfig};
    use crate::pde::{sample_ic, step, IcMode};
    use crate::symmetry::{D4Element, TranslationElement};
    use rand::Rng;

    fn tiny_model(seed: u64) -> ModelInstance<f64> {
        // 223 parameters: small enough for dense oracles
        let mut model = build::<f64>(ModelConfig::EquivRef {
            grid: 8,
            layers: 2,
            width: 4,
            seed,
        })
        .unwrap();
        let mut rng = crate::rng::stream(seed, 77);
        for v in model.params.iter_mut() {
            *v = rng.gen_range(-0.4..0.4);
        }
        model
    }

    fn tiny_batch(n: usize, count: usize, seed: u64) -> Vec<Transition<f64>> {
        (0..count)
            .map(|i| {
                let input: Field<f64> =
                    sample_ic(n, IcMode::Isotropic, crate::rng::derive(seed, i as u64));
                let target = step(&input, 1e-3, 5e-3, 5e-3).unwrap();
                Transition {
                    id: i,
                    input,
                    target,
                }
            })
            .collect()
    }

    fn weights() -> SmseWeights<f64> {
        SmseWeights::new(vec![0.5, 0.6, 0.55]).unwrap()
    }

    #[test]
    fn metric_vec_zero_and_lambda_limit() {
        let model = tiny_model(1);
        let batch = tiny_batch(8, 3, 2);
        let lambda = 3e-3;
        let op = MetricOperator::new(&model, &batch, weights(), lambda).unwrap();
        let zero = ParamVector::zeros(op.dim());
        assert!(metric_vec(&op, &zero).iter().all(|&v| v == 0.0));

        // empty anchor batch: the Jacobian term vanishes and χ = λI exactly
        let empty = MetricOperator::new(&model, &[], weights(), lambda).unwrap();
        let v = ParamVector(crate::autodiff::tests::random_vec(
            empty.dim(),
            3,
            1.0,
        ));
        let out = metric_vec(&empty, &v);
        for (o, vi) in out.iter().zip(v.iter()) {
            assert_eq!(*o, lambda * *vi);
        }
    }

    /// Dense Gauss–Newton assembly: (1/M)·Σ JᵀWJ + λI via JVP columns.
    fn dense_metric(
        model: &ModelInstance<f64>,
        batch: &[Transition<f64>],
        w: &SmseWeights<f64>,
        lambda: f64,
    ) -> nalgebra::DMatrix<f64> {
        let p = model.params.len();
        let out_shape = model.graph.output_shape();
        let out_len: usize = out_shape.iter().product();
        let per = out_len / w.channels();
        let mut a = nalgebra::DMatrix::<f64>::zeros(p, p);
        for t in batch {
            let input = t.input.to_tensor();
            let mut jac = nalgebra::DMatrix::<f64>::zeros(out_len, p);
            for k in 0..p {
                let mut e = ParamVector::zeros(p);
                e[k] = 1.0;
                let col = model.graph.jvp_outputs(&model.params, &input, &e).unwrap();
                for (r, v) in col.data().iter().enumerate() {
                    jac[(r, k)] = *v;
                }
            }
            let mut wj = jac.clone();
            for r in 0..out_len {
                let c = r / per;
                let scale = w.entry_weight(c, per);
                for k in 0..p {
                    wj[(r, k)] *= scale;
                }
            }
            a += jac.transpose() * wj;
        }
        a /= batch.len() as f64;
        for k in 0..p {
            a[(k, k)] += lambda;
        }
        a
    }

    #[test]
    fn metric_vec_matches_dense_gauss_newton() {
        let model = tiny_model(4);
        let batch = tiny_batch(8, 3, 5);
        let w = weights();
        let lambda = 1e-4;
        let op = MetricOperator::new(&model, &batch, w.clone(), lambda).unwrap();
        let dense = dense_metric(&model, &batch, &w, lambda);
        let v = ParamVector(crate::autodiff::tests::random_vec(op.dim(), 6, 1.0));
        let got = metric_vec(&op, &v);
        let want = &dense * nalgebra::DVector::from_column_slice(&v);
        let mut err = 0.0;
        let mut scale = 0.0;
        for k in 0..op.dim() {
            err += (got[k] - want[k]).powi(2);
            scale += want[k].powi(2);
        }
        assert!(err.sqrt() <= 1e-10 * scale.sqrt());
    }

    #[test]
    fn metric_linearity_symmetry_positivity() {
        let model = tiny_model(7);
        let batch = tiny_batch(8, 3, 8);
        let op = MetricOperator::new(&model, &batch, weights(), 1e-5).unwrap();
        let u = ParamVector(crate::autodiff::tests::random_vec(op.dim(), 9, 1.0));
        let v = ParamVector(crate::autodiff::tests::random_vec(op.dim(), 10, 1.0));

        // linearity
        let (alpha, beta) = (0.7, -1.3);
        let mut combo = u.scaled(alpha);
        combo.add_scaled(beta, &v);
        let lhs = metric_vec(&op, &combo);
        let mut rhs = metric_vec(&op, &u).scaled(alpha);
        rhs.add_scaled(beta, &metric_vec(&op, &v));
        let num: f64 = lhs
            .iter()
            .zip(rhs.iter())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        assert!(num <= 1e-12 * rhs.norm());

        // symmetry ⟨u, χv⟩ = ⟨χu, v⟩
        let a = u.dot(&metric_vec(&op, &v));
        let b = metric_vec(&op, &u).dot(&v);
        assert!((a - b).abs() <= 1e-12 * (a.abs() + 1.0));

        // positivity ⟨v, χv⟩ ≥ λ‖v‖²
        let q = v.dot(&metric_vec(&op, &v));
        assert!(q >= 1e-5 * v.dot(&v) - 1e-12);
    }

    #[test]
    fn influence_matches_dense_inverse() {
        let model = tiny_model(11);
        let batch = tiny_batch(8, 3, 12);
        let w = weights();
        let lambda = 1e-4;
        let tol = 1e-10;
        let ctx = InfluenceContext::build(
            &model,
            batch.clone(),
            w.clone(),
            lambda,
            CgConfig::with_tol(tol),
        )
        .unwrap();

        let dense = dense_metric(&model, &batch, &w, lambda);
        let inv = dense.try_inverse().unwrap();
        let op = MetricOperator::new(&model, &batch, w, lambda).unwrap();
        let grads: Vec<_> = batch.iter().map(|t| op.loss_grad(t).unwrap()).collect();
        for i in 0..batch.len() {
            for j in 0..batch.len() {
                let gi = nalgebra::DVector::from_column_slice(&grads[i]);
                let gj = nalgebra::DVector::from_column_slice(&grads[j]);
                let want = (gi.transpose() * &inv * gj)[(0, 0)];
                let got = ctx.raw_entry(i, j);
                assert!(
                    (got - want).abs() <= 1e-6 * want.abs().max(1e-12),
                    "I[{i}][{j}] = {got} vs {want}"
                );
            }
        }
    }

    #[test]
    fn self_influence_positive_and_bilinear_symmetry() {
        let model = tiny_model(13);
        let batch = tiny_batch(8, 4, 14);
        let tol = 1e-10;
        let ctx =
            InfluenceContext::build(&model, batch, weights(), 1e-4, CgConfig::with_tol(tol))
                .unwrap();
        for i in 0..4 {
            assert!(ctx.raw_entry(i, i) > 0.0, "self influence must be positive");
            let rec = ctx
                .transform_influence(i, GroupElement::D4(D4Element::E))
                .unwrap();
            assert_eq!(rec.raw, ctx.raw_entry(i, i).to_f64());
        }
        for i in 0..4 {
            for j in 0..4 {
                let gap = (ctx.raw_entry(i, j) - ctx.raw_entry(j, i)).abs();
                let bound = f64::max(1e-8, 10.0 * tol * ctx.raw_entry(i, i).abs());
                assert!(gap <= bound, "asymmetry {gap} at ({i},{j})");
            }
        }
    }

    #[test]
    fn large_lambda_limit() {
        let model = tiny_model(15);
        let batch = tiny_batch(8, 3, 16);
        let lambda = 1e6;
        let ctx = InfluenceContext::build(
            &model,
            batch,
            weights(),
            lambda,
            CgConfig::with_tol(1e-12),
        )
        .unwrap();
        let g = GroupElement::D4(D4Element::R);
        let rec = ctx.transform_influence(0, g).unwrap();
        // χ ≈ λI, so I ≈ (g_gx · g_x)/λ
        let op = &ctx.op;
        let gx = op.loss_grad(&ctx.batch[0]).unwrap();
        let transformed = Transition {
            id: 0,
            input: apply(g, &ctx.batch[0].input).unwrap(),
            target: apply(g, &ctx.batch[0].target).unwrap(),
        };
        let ggx = op.loss_grad(&transformed).unwrap();
        let approx = ggx.dot(&gx) / lambda;
        assert!(
            (rec.raw - approx).abs() <= 0.01 * approx.abs(),
            "{} vs {}",
            rec.raw,
            approx
        );
    }

    #[test]
    fn identical_examples_degenerate_baseline() {
        let model = tiny_model(17);
        let one = tiny_batch(8, 1, 18).remove(0);
        let batch: Vec<Transition<f64>> = (0..3)
            .map(|i| Transition {
                id: i,
                input: one.input.clone(),
                target: one.target.clone(),
            })
            .collect();
        let err = match InfluenceContext::build(
            &model,
            batch,
            weights(),
            1e-4,
            CgConfig::with_tol(1e-10),
        ) {
            Err(e) => e,
            Ok(_) => panic!("identical examples must fail standardization"),
        };
        assert!(matches!(err, Error::Degenerate(_)), "{err:?}");
    }

    #[test]
    fn uniform_coherence_on_equiv_ref() {
        // exactly translation-equivariant model: gradients at translated
        // transitions coincide, so Î(x, Tx) = Î(x, x)
        let model = tiny_model(19);
        let batch = tiny_batch(8, 4, 20);
        let ctx =
            InfluenceContext::build(&model, batch, weights(), 1e-5, CgConfig::with_tol(1e-10))
                .unwrap();
        for col in 0..2 {
            let self_rec = ctx
                .transform_influence(col, GroupElement::D4(D4Element::E))
                .unwrap();
            for (a, b) in [(1usize, 0usize), (3, 5), (7, 2)] {
                let g = GroupElement::Translate(TranslationElement::new(a, b, 8).unwrap());
                let rec = ctx.transform_influence(col, g).unwrap();
                let rel = (rec.standardized - self_rec.standardized).abs()
                    / self_rec.standardized.abs();
                assert!(rel <= 1e-8, "T({a},{b}) col {col}: rel {rel}");
            }
        }
    }
}
