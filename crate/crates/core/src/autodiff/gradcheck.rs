use rand::Rng;

use super::Tensor;
use crate::error::Result;

/// Location of a single scalar inside a parameter list.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamCoord {
    pub tensor: usize,
    pub index: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst: Option<ParamCoord>,
    pub checked: usize,
}

/// Uniformly samples `count` coordinates (with replacement) across all
/// parameter elements.
pub fn sample_coords<R: Rng>(params: &[Tensor<f64>], count: usize, rng: &mut R) -> Vec<ParamCoord> {
    let total: usize = params.iter().map(Tensor::len).sum();
    (0..count)
        .map(|_| {
            let mut flat = rng.random_range(0..total);
            let mut tensor = 0;
            while flat >= params[tensor].len() {
                flat -= params[tensor].len();
                tensor += 1;
            }
            ParamCoord { tensor, index: flat }
        })
        .collect()
}

/// Compares analytic gradients against central differences.
///
/// `f` evaluates the loss and its gradient (one vector per parameter
/// tensor). The error at each coordinate is
/// `|analytic - numeric| / max(1, |analytic|, |numeric|)`.
pub fn finite_diff_check<F>(params: &[Tensor<f64>], coords: &[ParamCoord], eps: f64, mut f: F) -> Result<GradCheckReport>
where
    F: FnMut(&[Tensor<f64>]) -> Result<(f64, Vec<Vec<f64>>)>,
{
    let (_, analytic) = f(params)?;
    let mut work: Vec<Tensor<f64>> = params.to_vec();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        checked: 0,
    };
    for &c in coords {
        let orig = work[c.tensor].data()[c.index];
        work[c.tensor].data_mut()[c.index] = orig + eps;
        let (plus, _) = f(&work)?;
        work[c.tensor].data_mut()[c.index] = orig - eps;
        let (minus, _) = f(&work)?;
        work[c.tensor].data_mut()[c.index] = orig;
        let numeric = (plus - minus) / (2.0 * eps);
        let a = analytic[c.tensor][c.index];
        let err = (a - numeric).abs() / 1f64.max(a.abs()).max(numeric.abs());
        if err >= report.max_rel_error {
            report.max_rel_error = err;
            report.worst = Some(c);
        }
        report.checked += 1;
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Graph;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn linear_function_is_exact() {
        // f(x) = 3 x0 - 2 x1 + 0.5 x2
        let params = vec![Tensor::new(vec![3], vec![0.3, -1.2, 2.0]).unwrap()];
        let coeffs = [3.0, -2.0, 0.5];
        let coords: Vec<_> = (0..3).map(|index| ParamCoord { tensor: 0, index }).collect();
        let rep = finite_diff_check(&params, &coords, 1e-4, |p| {
            let v: f64 = p[0].data().iter().zip(coeffs).map(|(a, b)| a * b).sum();
            Ok((v, vec![coeffs.to_vec()]))
        })
        .unwrap();
        assert!(rep.max_rel_error < 1e-10, "{rep:?}");
        assert_eq!(rep.checked, 3);
    }

    #[test]
    fn two_class_softmax_cross_entropy() {
        // Hand-verified: logits (z0, z1), target 0, loss = -ln softmax_0,
        // dL/dz0 = p0 - 1, dL/dz1 = p1.
        let params = vec![Tensor::new(vec![1, 1, 2], vec![0.4, -0.7]).unwrap().with_grad()];
        let coords = vec![ParamCoord { tensor: 0, index: 0 }, ParamCoord { tensor: 0, index: 1 }];
        let rep = finite_diff_check(&params, &coords, 1e-5, |p| {
            let mut g = Graph::new();
            let z = g.leaf(&p[0]);
            let s = g.softmax_over(z, 1, None)?;
            let l = g.cross_entropy(s, &[0], 0.0)?;
            let loss = g.value(l)[0];
            let grads = g.backward(l)?;
            let grad = grads.get(z).map(<[f64]>::to_vec).unwrap_or_default();
            Ok((loss, vec![grad]))
        })
        .unwrap();
        assert!(rep.max_rel_error < 1e-6, "{rep:?}");

        let p0 = 1.0 / (1.0 + (-1.1f64).exp());
        let mut g = Graph::new();
        let z = g.leaf(&params[0]);
        let s = g.softmax_over(z, 1, None).unwrap();
        let l = g.cross_entropy(s, &[0], 0.0).unwrap();
        assert!((g.value(l)[0] + p0.ln()).abs() < 1e-12);
        let grads = g.backward(l).unwrap();
        let dz = grads.get(z).unwrap();
        assert!((dz[0] - (p0 - 1.0)).abs() < 1e-12);
        assert!((dz[1] - (1.0 - p0)).abs() < 1e-12);
    }

    #[test]
    fn sampled_coordinates_are_in_range() {
        let params = vec![Tensor::<f64>::zeros(vec![2]), Tensor::zeros(vec![5, 3])];
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for c in sample_coords(&params, 200, &mut rng) {
            assert!(c.index < params[c.tensor].len());
        }
    }
}
