//! Real-valued affine coupling layer.

use rand::Rng;

use crate::autodiff::{BoundParams, ParamStore, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::rng;

/// `x1' = e^s * x1 + t` with `log J = sum s`.
pub fn affine_forward(x1: &[f64], s: &[f64], t: &[f64]) -> Result<(Vec<f64>, f64)> {
    check_lengths(x1, s, t)?;
    let y = x1.iter().zip(s).zip(t).map(|((x, s), t)| s.exp() * x + t).collect();
    Ok((y, s.iter().sum()))
}

/// `x1 = e^{-s} * (x1' - t)` with `log J = -sum s`.
pub fn affine_inverse(x1: &[f64], s: &[f64], t: &[f64]) -> Result<(Vec<f64>, f64)> {
    check_lengths(x1, s, t)?;
    let y = x1.iter().zip(s).zip(t).map(|((x, s), t)| (-s).exp() * (x - t)).collect();
    Ok((y, -s.iter().sum::<f64>()))
}

fn check_lengths(x1: &[f64], s: &[f64], t: &[f64]) -> Result<()> {
    if s.len() != x1.len() || t.len() != x1.len() {
        return Err(Error::Shape {
            op: "affine_coupling",
            lhs: vec![x1.len()],
            rhs: vec![s.len(), t.len()],
        });
    }
    Ok(())
}

/// Affine coupling on `R^n` with one-hidden-layer tanh networks for `s` and `t`.
#[derive(Clone, Debug)]
pub struct AffineCouplingLayer {
    mask: Vec<bool>,
    params: ParamStore,
}

impl AffineCouplingLayer {
    /// `mask[i] == true` marks an active coordinate. Weights are uniform in
    /// `(-scale, scale)`.
    pub fn new(mask: Vec<bool>, hidden: usize, scale: f64, seed: u64) -> Result<Self> {
        let n_active = mask.iter().filter(|&&m| m).count();
        let n_frozen = mask.len() - n_active;
        if n_active == 0 || hidden == 0 {
            return Err(Error::domain("affine coupling needs active coordinates and hidden units"));
        }
        let mut rng = rng::stream(seed, 0);
        let mut draw = |shape: &[usize]| {
            let n = shape.iter().product();
            Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-scale..scale)).collect()).expect("shape")
        };
        let mut params = ParamStore::new();
        for net in ["s", "t"] {
            params.insert(format!("{net}.w1"), draw(&[n_frozen.max(1), hidden]))?;
            params.insert(format!("{net}.b1"), draw(&[hidden]))?;
            params.insert(format!("{net}.w2"), draw(&[hidden, n_active]))?;
            params.insert(format!("{net}.b2"), draw(&[n_active]))?;
        }
        Ok(Self { mask, params })
    }

    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    fn split(&self, x: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        if x.len() != self.mask.len() {
            return Err(Error::Shape {
                op: "AffineCouplingLayer",
                lhs: vec![self.mask.len()],
                rhs: vec![x.len()],
            });
        }
        let active = x.iter().zip(&self.mask).filter(|(_, &m)| m).map(|(v, _)| *v).collect();
        let frozen = x.iter().zip(&self.mask).filter(|(_, &m)| !m).map(|(v, _)| *v).collect();
        Ok((active, frozen))
    }

    fn merge(&self, active: &[f64], frozen: &[f64]) -> Vec<f64> {
        let (mut a, mut f) = (active.iter(), frozen.iter());
        self.mask
            .iter()
            .map(|&m| if m { *a.next().unwrap() } else { *f.next().unwrap() })
            .collect()
    }

    /// `(s(x2), t(x2))` for the frozen coordinates `x2`.
    pub fn scale_shift(&self, frozen: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        let tape = Tape::new();
        let bound = self.params.bind(&tape, false);
        let input = if frozen.is_empty() { vec![0.0] } else { frozen.to_vec() };
        let n = input.len();
        let x = tape.constant(Tensor::new(vec![1, n], input)?);
        let s = mlp(x, &bound, 0)?.value().into_data();
        let t = mlp(x, &bound, 4)?.value().into_data();
        Ok((s, t))
    }

    pub fn forward(&self, x: &[f64]) -> Result<(Vec<f64>, f64)> {
        let (active, frozen) = self.split(x)?;
        let (s, t) = self.scale_shift(&frozen)?;
        let (y, logj) = affine_forward(&active, &s, &t)?;
        Ok((self.merge(&y, &frozen), logj))
    }

    pub fn inverse(&self, x: &[f64]) -> Result<(Vec<f64>, f64)> {
        let (active, frozen) = self.split(x)?;
        let (s, t) = self.scale_shift(&frozen)?;
        let (y, logj) = affine_inverse(&active, &s, &t)?;
        Ok((self.merge(&y, &frozen), logj))
    }
}

fn mlp<'t>(x: Var<'t>, p: &BoundParams<'t>, first: usize) -> Result<Var<'t>> {
    let h = x.matmul(p.get(first))?.add(p.get(first + 1))?.tanh();
    let out = h.matmul(p.get(first + 2))?.add(p.get(first + 3))?;
    let n = out.shape()[1];
    out.reshape(&[n])
}
