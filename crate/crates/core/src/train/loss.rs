//! Mean absolute and mean squared error with their gradients.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::net::Tensor5;
use crate::scalar::Real;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    L1,
    L2,
}

impl LossKind {
    pub fn name(self) -> &'static str {
        match self {
            LossKind::L1 => "l1",
            LossKind::L2 => "l2",
        }
    }
}

impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "l1" => Ok(LossKind::L1),
            "l2" => Ok(LossKind::L2),
            other => Err(Error::Parse(format!("unknown loss {other:?} (expected l1 or l2)"))),
        }
    }
}

fn check(pred: &[impl Real], target: &[impl Real]) -> Result<()> {
    if pred.len() != target.len() || pred.is_empty() {
        return Err(Error::Shape(format!(
            "loss needs equal nonempty inputs, got {} and {}",
            pred.len(),
            target.len()
        )));
    }
    Ok(())
}

/// `mean |pred - target|` and its subgradient `sign(pred - target) / N`
/// (zero at ties).
pub fn loss_l1<T: Real>(pred: &[T], target: &[T]) -> Result<(f64, Vec<T>)> {
    check(pred, target)?;
    let scale = T::one() / T::lit(pred.len() as f64);
    let mut sum = 0.0f64;
    let grad = pred
        .iter()
        .zip(target)
        .map(|(&p, &t)| {
            let d = p - t;
            sum += d.abs().as_f64();
            if d > T::zero() {
                scale
            } else if d < T::zero() {
                -scale
            } else {
                T::zero()
            }
        })
        .collect();
    Ok((sum / pred.len() as f64, grad))
}

/// `mean (pred - target)^2` and its gradient `2 (pred - target) / N`.
pub fn loss_l2<T: Real>(pred: &[T], target: &[T]) -> Result<(f64, Vec<T>)> {
    check(pred, target)?;
    let scale = T::lit(2.0) / T::lit(pred.len() as f64);
    let mut sum = 0.0f64;
    let grad = pred
        .iter()
        .zip(target)
        .map(|(&p, &t)| {
            let d = p - t;
            sum += (d * d).as_f64();
            d * scale
        })
        .collect();
    Ok((sum / pred.len() as f64, grad))
}

pub fn loss<T: Real>(kind: LossKind, pred: &Tensor5<T>, target: &Tensor5<T>) -> Result<(f64, Tensor5<T>)> {
    pred.same_shape(target)?;
    let (value, grad) = match kind {
        LossKind::L1 => loss_l1(pred.data(), target.data())?,
        LossKind::L2 => loss_l2(pred.data(), target.data())?,
    };
    let [b, c, x, y, z] = pred.dims();
    Ok((value, Tensor5::from_vec(b, c, [x, y, z], grad)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_inputs() {
        let a = [0.3f64, 0.7, 1.0];
        for f in [loss_l1::<f64>, loss_l2::<f64>] {
            let (v, g) = f(&a, &a).unwrap();
            assert_eq!(v, 0.0);
            assert!(g.iter().all(|&x| x == 0.0));
        }
    }

    #[test]
    fn hand_values() {
        let (l1, _) = loss_l1(&[1.0f64, 3.0], &[0.0, 1.0]).unwrap();
        let (l2, _) = loss_l2(&[1.0f64, 3.0], &[0.0, 1.0]).unwrap();
        assert_eq!((l1, l2), (1.5, 2.5));
    }

    #[test]
    fn l1_tie_subgradient_is_zero() {
        let (_, g) = loss_l1(&[1.0f64, 2.0, 0.5], &[1.0, 1.0, 1.0]).unwrap();
        assert_eq!(g, [0.0, 1.0 / 3.0, -1.0 / 3.0]);
    }

    #[test]
    fn mismatched_lengths() {
        assert!(loss_l2(&[1.0f64], &[1.0, 2.0]).is_err());
        assert!(loss_l1::<f64>(&[], &[]).is_err());
    }

    #[test]
    fn parse_kind() {
        assert_eq!("L1".parse::<LossKind>().unwrap(), LossKind::L1);
        assert!("l3".parse::<LossKind>().is_err());
    }
}
