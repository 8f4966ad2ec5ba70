//! Central-difference verification of tape gradients.

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor4, Var};

#[derive(Clone, Debug)]
pub struct GradCheckConfig {
    pub step: f64,
    pub tolerance: f64,
    /// Probe at most this many elements per leaf, evenly strided. `None`
    /// probes every element.
    pub max_probes_per_leaf: Option<usize>,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig { step: 1e-4, tolerance: 1e-3, max_probes_per_leaf: None }
    }
}

#[derive(Clone, Debug)]
pub struct LeafReport {
    pub leaf: usize,
    pub probes: usize,
    pub max_abs_error: f64,
    pub max_rel_error: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub tolerance: f64,
    pub leaves: Vec<LeafReport>,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.leaves.iter().fold(0.0, |m, l| m.max(l.max_rel_error))
    }

    pub fn passed(&self) -> bool {
        self.leaves.iter().all(|l| l.max_rel_error < self.tolerance)
    }
}

/// Elements whose gradients are tiny compared to the rest of their leaf are
/// judged against this fraction of the leaf's largest gradient.
const RELATIVE_FLOOR: f64 = 1e-2;

/// Compares `backward()` of the scalar `f(leaves)` to central differences.
///
/// `f` must be deterministic and build its graph on the tape it is given.
pub fn grad_check<F>(f: F, leaves: &[Tensor4], cfg: &GradCheckConfig) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    if !(cfg.step > 0.0 && cfg.step.is_finite()) {
        return Err(Error::InvalidArgument(format!("finite-difference step must be positive, got {}", cfg.step)));
    }
    if leaves.is_empty() {
        return Err(Error::InvalidArgument("grad_check needs at least one leaf".into()));
    }

    let mut tape = Tape::new();
    let vars: Vec<Var> = leaves.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let loss = f(&mut tape, &vars)?;
    tape.backward(loss)?;
    let analytic: Vec<Tensor4> = vars
        .iter()
        .zip(leaves)
        .map(|(v, t)| tape.grad(*v).cloned().unwrap_or_else(|| Tensor4::zeros(t.shape())))
        .collect();

    let evaluate = |inputs: &[Tensor4]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), false)).collect();
        let loss = f(&mut tape, &vars)?;
        tape.value(loss).item()
    };

    let mut work: Vec<Tensor4> = leaves.to_vec();
    let mut reports = Vec::with_capacity(leaves.len());
    for (li, leaf) in leaves.iter().enumerate() {
        let n = leaf.numel();
        let stride = match cfg.max_probes_per_leaf {
            Some(m) if m > 0 && m < n => n.div_ceil(m),
            _ => 1,
        };
        let mut numeric = Vec::new();
        let mut probed = Vec::new();
        for i in (0..n).step_by(stride) {
            let orig = leaf.data()[i];
            work[li].data_mut()[i] = orig + cfg.step;
            let plus = evaluate(&work)?;
            work[li].data_mut()[i] = orig - cfg.step;
            let minus = evaluate(&work)?;
            work[li].data_mut()[i] = orig;
            numeric.push((plus - minus) / (2.0 * cfg.step));
            probed.push(i);
        }
        let a = &analytic[li];
        let scale = probed
            .iter()
            .zip(&numeric)
            .fold(0.0f64, |m, (&i, nv)| m.max(a.data()[i].abs()).max(nv.abs()));
        let floor = (RELATIVE_FLOOR * scale).max(1e-10);
        let mut max_abs = 0.0f64;
        let mut max_rel = 0.0f64;
        for (&i, nv) in probed.iter().zip(&numeric) {
            let av = a.data()[i];
            let err = (av - nv).abs();
            max_abs = max_abs.max(err);
            max_rel = max_rel.max(err / av.abs().max(nv.abs()).max(floor));
        }
        reports.push(LeafReport { leaf: li, probes: probed.len(), max_abs_error: max_abs, max_rel_error: max_rel });
    }
    Ok(GradCheckReport { tolerance: cfg.tolerance, leaves: reports })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Shape;

    #[test]
    fn linear_map_is_exact() {
        let x = Tensor4::new(Shape::new(1, 2, 2, 2), (0..8).map(|i| i as f64 * 0.3 - 1.0).collect()).unwrap();
        let report = grad_check(
            |tape, v| {
                let y = tape.scale(v[0], 2.0);
                Ok(tape.reduce_sum(y))
            },
            &[x],
            &GradCheckConfig::default(),
        )
        .unwrap();
        assert!(report.passed());
        assert!(report.max_rel_error() < 1e-9);
    }

    #[test]
    fn zero_step_rejected() {
        let x = Tensor4::zeros(Shape::new(1, 1, 1, 1));
        let cfg = GradCheckConfig { step: 0.0, ..Default::default() };
        let r = grad_check(|tape, v| Ok(tape.reduce_sum(v[0])), &[x], &cfg);
        assert!(matches!(r, Err(Error::InvalidArgument(_))));
    }
}
