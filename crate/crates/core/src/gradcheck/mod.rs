//! Central-difference verification of tape gradients.
//!
//! Coordinates whose ±eps perturbation flips a branch decision (a ReLU
//! sign, a pooling argmax, a loss clamp) sit on a kink; they are counted
//! as skipped instead of compared.

pub mod suite;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::params::{Ctx, Mode, ParamId, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    pub eps: f64,
    pub mode: Mode,
    /// Check at most this many coordinates per parameter tensor.
    pub max_coords: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            eps: 1e-4,
            mode: Mode::Eval,
            max_coords: None,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct GradCheckReport {
    /// max over checked coordinates of |a - n| / max(1, |a| + |n|)
    pub max_rel_error: f64,
    pub checked: usize,
    pub skipped: usize,
    pub worst: Option<(String, usize)>,
}

impl GradCheckReport {
    pub fn merge(&mut self, other: GradCheckReport) {
        if other.max_rel_error > self.max_rel_error {
            self.max_rel_error = other.max_rel_error;
            self.worst = other.worst;
        }
        self.checked += other.checked;
        self.skipped += other.skipped;
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1.0)
}

fn evaluate<F>(store: &mut ParamStore, mode: Mode, f: &mut F) -> Result<(f64, u64)>
where
    F: FnMut(&mut Ctx) -> Result<Var>,
{
    let mut tape = Tape::no_grad();
    tape.track_kinks();
    let mut cx = Ctx::with_tape(store, mode, tape);
    let out = f(&mut cx)?;
    let value = cx.tape.value(out).item()?;
    Ok((value, cx.tape.kink_signature().unwrap_or(0)))
}

/// Compares backward-pass gradients of the scalar `f` against central
/// differences for every target parameter. Batch-norm buffers are restored
/// afterwards.
pub fn grad_check<F>(
    store: &mut ParamStore,
    targets: &[ParamId],
    opts: &GradCheckOptions,
    mut f: F,
) -> Result<GradCheckReport>
where
    F: FnMut(&mut Ctx) -> Result<Var>,
{
    let saved = store.snapshot_buffers();
    let (grads, base_sig) = {
        let mut tape = Tape::new();
        tape.track_kinks();
        let mut cx = Ctx::with_tape(store, opts.mode, tape);
        let out = f(&mut cx)?;
        let shape = cx.tape.shape(out).to_vec();
        if shape.iter().product::<usize>() != 1 {
            return Err(Error::NonScalar(shape));
        }
        let sig = cx.tape.kink_signature().unwrap_or(0);
        (cx.backward(out)?, sig)
    };
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut report = GradCheckReport::default();
    for &id in targets {
        let len = store.get(id).len();
        let coords: Vec<usize> = match opts.max_coords {
            Some(k) if k < len => sample(&mut rng, len, k).into_vec(),
            _ => (0..len).collect(),
        };
        let analytic = grads
            .get(id)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(store.get(id).shape()));
        for j in coords {
            let orig = store.get(id).data()[j];
            store.get_mut(id).data_mut()[j] = orig + opts.eps;
            let plus = evaluate(store, opts.mode, &mut f);
            store.get_mut(id).data_mut()[j] = orig - opts.eps;
            let minus = evaluate(store, opts.mode, &mut f);
            store.get_mut(id).data_mut()[j] = orig;
            let ((fp, sp), (fm, sm)) = (plus?, minus?);
            if sp != base_sig || sm != base_sig {
                report.skipped += 1;
                continue;
            }
            let numeric = (fp - fm) / (2.0 * opts.eps);
            let err = relative_error(analytic.data()[j], numeric);
            report.checked += 1;
            if err > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(err);
                report.worst = Some((store.name(id).to_string(), j));
            }
        }
    }
    store.restore_buffers(saved);
    Ok(report)
}

/// Gradient check of a scalar function of free tensors.
pub fn finite_diff_grad_check<F>(inputs: &[Tensor], eps: f64, mut f: F) -> Result<GradCheckReport>
where
    F: FnMut(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut store = ParamStore::new();
    let ids: Vec<ParamId> = inputs
        .iter()
        .enumerate()
        .map(|(i, t)| store.add(format!("input{i}"), t.clone()))
        .collect();
    let opts = GradCheckOptions {
        eps,
        ..Default::default()
    };
    grad_check(&mut store, &ids, &opts, |cx| {
        let vars: Vec<Var> = ids.iter().map(|&id| cx.param(id)).collect();
        f(&mut cx.tape, &vars)
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_function_is_exact() {
        let x = Tensor::from_vec(&[4], vec![0.3, -1.2, 2.0, 0.7]).unwrap();
        let r = finite_diff_grad_check(&[x], 1e-4, |t, v| {
            let y = t.scale(v[0], 3.0);
            let y = t.add_scalar(y, 1.0);
            Ok(t.sum(y))
        })
        .unwrap();
        assert_eq!(r.checked, 4);
        assert!(r.max_rel_error < 1e-8, "{r:?}");
    }

    #[test]
    fn sigmoid_of_sum() {
        let x = Tensor::from_vec(&[3], vec![0.1, -0.4, 0.25]).unwrap();
        let r = finite_diff_grad_check(&[x], 1e-4, |t, v| {
            let s = t.sum(v[0]);
            Ok(t.sigmoid(s))
        })
        .unwrap();
        assert!(r.max_rel_error < 1e-6, "{r:?}");
    }

    #[test]
    fn relu_kink_is_skipped() {
        let x = Tensor::from_vec(&[3], vec![0.0, 1.0, -1.0]).unwrap();
        let r = finite_diff_grad_check(&[x], 1e-4, |t, v| {
            let y = t.relu(v[0]);
            Ok(t.sum(y))
        })
        .unwrap();
        assert_eq!(r.skipped, 1);
        assert_eq!(r.checked, 2);
        assert!(r.max_rel_error < 1e-10);
    }

    #[test]
    fn non_scalar_output_is_rejected() {
        let x = Tensor::ones(&[2]);
        let r = finite_diff_grad_check(&[x], 1e-4, |t, v| Ok(t.scale(v[0], 2.0)));
        assert!(matches!(r, Err(Error::NonScalar(_))));
    }
}
