use super::graph::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::rng::SplitMix64;
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    pub eps: f64,
    /// Coordinates probed per parameter tensor; tensors at or below this
    /// size are probed exhaustively.
    pub max_coords: usize,
    pub seed: u64,
    /// Drop probes whose `±eps` passes land on a different side of a
    /// leaky-relu, abs or rate-floor kink than the unperturbed pass.
    pub skip_kinks: bool,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradCheckReport {
    /// Worst relative error over the probes that were compared.
    pub worst: f64,
    pub probes: usize,
    pub skipped: usize,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            eps: 1e-4,
            max_coords: 24,
            seed: 0,
            skip_kinks: false,
        }
    }
}

/// Compares reverse-mode gradients of the scalar built by `f` against
/// central differences and returns the worst relative error
/// `|a − n| / max(1e-12, |a| + |n|)` over the probed coordinates.
///
/// `f` receives the graph and one differentiable leaf per entry of `params`.
pub fn grad_check<F>(f: F, params: &[Tensor], opts: &GradCheckOptions) -> Result<f64>
where
    F: Fn(&mut Graph, &[NodeId]) -> Result<NodeId>,
{
    grad_check_report(f, params, opts).map(|r| r.worst)
}

/// [`grad_check`] with probe counts.
pub fn grad_check_report<F>(f: F, params: &[Tensor], opts: &GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[NodeId]) -> Result<NodeId>,
{
    if opts.eps <= 0.0 || !opts.eps.is_finite() {
        return Err(Error::contract(format!("grad_check eps must be > 0, got {}", opts.eps)));
    }
    let eval = |ps: &[Tensor]| -> Result<(f64, Vec<bool>)> {
        let mut g = Graph::new();
        let ids: Vec<NodeId> = ps.iter().map(|p| g.constant(p.clone())).collect();
        let root = f(&mut g, &ids)?;
        let kinks = if opts.skip_kinks { g.kink_pattern() } else { Vec::new() };
        Ok((g.scalar(root, "grad_check probe")?, kinks))
    };

    let mut g = Graph::new();
    let ids: Vec<NodeId> = params.iter().map(|p| g.param(p.clone())).collect();
    let root = f(&mut g, &ids)?;
    g.scalar(root, "grad_check loss")?;
    let grads = g.backward(root)?;
    let base = if opts.skip_kinks { g.kink_pattern() } else { Vec::new() };

    let mut rng = SplitMix64::new(opts.seed);
    let mut report = GradCheckReport {
        worst: 0.0,
        probes: 0,
        skipped: 0,
    };
    let mut probe = params.to_vec();
    for (pi, id) in ids.iter().enumerate() {
        let n = params[pi].numel();
        let analytic = grads.get(*id).map(|t| t.data().to_vec()).unwrap_or(vec![0.0; n]);
        let coords: Vec<usize> = if n <= opts.max_coords {
            (0..n).collect()
        } else {
            (0..opts.max_coords)
                .map(|_| rng.range_inclusive(0, n as u64 - 1) as usize)
                .collect()
        };
        for k in coords {
            let orig = params[pi].data()[k];
            probe[pi].data_mut()[k] = orig + opts.eps;
            let (up, up_kinks) = eval(&probe)?;
            probe[pi].data_mut()[k] = orig - opts.eps;
            let (down, down_kinks) = eval(&probe)?;
            probe[pi].data_mut()[k] = orig;
            report.probes += 1;
            if up_kinks != base || down_kinks != base {
                report.skipped += 1;
                continue;
            }
            let numeric = (up - down) / (2.0 * opts.eps);
            let a = analytic[k];
            let rel = (a - numeric).abs() / f64::max(1e-12, a.abs() + numeric.abs());
            report.worst = report.worst.max(rel);
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_is_tight() {
        let x = Tensor::new(vec![5], vec![0.3, -1.2, 2.0, 0.7, -0.1]).unwrap();
        let err = grad_check(
            |g, p| {
                let c = g.constant(Tensor::full(&[5], 0.25));
                let d = g.sub(p[0], c)?;
                let s = g.square(d);
                Ok(g.mean(s))
            },
            &[x],
            &GradCheckOptions {
                eps: 1e-5,
                ..Default::default()
            },
        )
        .unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn constant_function_has_zero_error() {
        let x = Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap();
        let err = grad_check(
            |g, p| {
                let z = g.scale(p[0], 0.0);
                let s = g.sum(z);
                Ok(g.add_scalar(s, 4.0))
            },
            &[x],
            &GradCheckOptions::default(),
        )
        .unwrap();
        assert_eq!(err, 0.0);
    }

    #[test]
    fn kink_crossing_probes_are_skipped() {
        // |x| at 5e-5 with eps 1e-4: the central difference straddles zero.
        let x = Tensor::new(vec![2], vec![5e-5, 0.8]).unwrap();
        let f = |g: &mut Graph, p: &[NodeId]| {
            let a = g.abs(p[0]);
            Ok(g.sum(a))
        };
        let plain = grad_check_report(f, &[x.clone()], &GradCheckOptions::default()).unwrap();
        assert_eq!((plain.probes, plain.skipped), (2, 0));
        assert!(plain.worst > 0.3, "{plain:?}");
        let opts = GradCheckOptions {
            skip_kinks: true,
            ..Default::default()
        };
        let r = grad_check_report(f, &[x], &opts).unwrap();
        assert_eq!((r.probes, r.skipped), (2, 1));
        assert!(r.worst < 1e-9, "{r:?}");
    }

    #[test]
    fn rejects_bad_eps() {
        let x = Tensor::scalar(1.0);
        let r = grad_check(|g, p| Ok(g.sum(p[0])), &[x], &GradCheckOptions {
            eps: 0.0,
            ..Default::default()
        });
        assert!(r.is_err());
    }

    #[test]
    fn non_finite_probe_is_numeric_error() {
        let x = Tensor::scalar(0.0);
        let r = grad_check(
            |g, p| {
                let one = g.constant(Tensor::scalar(1.0));
                Ok(g.div(one, p[0])?)
            },
            &[x],
            &GradCheckOptions::default(),
        );
        assert!(matches!(r, Err(Error::Numeric(_))));
    }
}
