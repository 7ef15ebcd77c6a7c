use rand::Rng;

use crate::error::{Error, Result};
use crate::objective::PointSet;
use crate::rng;

/// Axis-aligned box `[lo_i, hi_i]`.
#[derive(Debug, Clone, PartialEq)]
pub struct BoxDomain {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

impl BoxDomain {
    pub fn new(lo: Vec<f64>, hi: Vec<f64>) -> Result<Self> {
        if lo.is_empty() || lo.len() != hi.len() {
            return Err(Error::InvalidArgument(
                "box bounds must be nonempty and of equal length".into(),
            ));
        }
        if lo
            .iter()
            .zip(&hi)
            .any(|(a, b)| !(a < b) || !a.is_finite() || !b.is_finite())
        {
            return Err(Error::InvalidArgument(format!("degenerate box {lo:?} x {hi:?}")));
        }
        Ok(BoxDomain { lo, hi })
    }

    pub fn dim(&self) -> usize {
        self.lo.len()
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        x.iter()
            .zip(self.lo.iter().zip(&self.hi))
            .all(|(v, (a, b))| a <= v && v <= b)
    }

    /// `count` i.i.d. uniform points drawn from `rng`.
    pub fn sample<R: Rng>(&self, count: usize, rng: &mut R) -> PointSet {
        let mut coords = Vec::with_capacity(count * self.dim());
        for _ in 0..count {
            for (a, b) in self.lo.iter().zip(&self.hi) {
                coords.push(rng.random_range(*a..*b));
            }
        }
        PointSet {
            dim: self.dim(),
            coords,
        }
    }
}

/// Uniform collocation points in `domain`, drawn from the `sampling` stream.
pub fn collocation_sample(domain: &BoxDomain, count: usize, seed: u64) -> Result<PointSet> {
    if count == 0 {
        return Err(Error::InvalidArgument("collocation count must be at least 1".into()));
    }
    let domain = BoxDomain::new(domain.lo.clone(), domain.hi.clone())?;
    Ok(domain.sample(count, &mut rng::stream(seed, rng::SAMPLING)))
}

/// `count` evenly spaced values from `a` to `b` inclusive.
pub fn linspace(a: f64, b: f64, count: usize) -> Vec<f64> {
    match count {
        0 => vec![],
        1 => vec![a],
        _ => (0..count)
            .map(|i| a + (b - a) * i as f64 / (count - 1) as f64)
            .collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_and_inside() {
        let unit = BoxDomain::new(vec![0.0, 0.0], vec![1.0, 1.0]).unwrap();
        let a = collocation_sample(&unit, 1, 5).unwrap();
        assert_eq!(a, collocation_sample(&unit, 1, 5).unwrap());
        let big = collocation_sample(&unit, 10_000, 1).unwrap();
        assert!(big.iter().all(|x| unit.contains(x)));
        for d in 0..2 {
            let mean: f64 = big.iter().map(|x| x[d]).sum::<f64>() / 10_000.0;
            assert!((mean - 0.5).abs() < 0.02, "{mean}");
        }
    }

    #[test]
    fn rejects_degenerate() {
        assert!(BoxDomain::new(vec![0.0], vec![0.0]).is_err());
        assert!(BoxDomain::new(vec![0.0], vec![1.0, 2.0]).is_err());
        let d = BoxDomain {
            lo: vec![1.0],
            hi: vec![0.0],
        };
        assert!(collocation_sample(&d, 3, 0).is_err());
        let ok = BoxDomain::new(vec![0.0], vec![1.0]).unwrap();
        assert!(collocation_sample(&ok, 0, 0).is_err());
    }

    #[test]
    fn linspace_endpoints() {
        assert_eq!(linspace(-1.0, 1.0, 3), vec![-1.0, 0.0, 1.0]);
        assert_eq!(linspace(2.0, 3.0, 1), vec![2.0]);
    }
}
