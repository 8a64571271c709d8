//! Low-rank adapters. Weights here act on row vectors (`y = x·W`, `W` is
//! `d_in × d_out`), so the adapter stores `down: d_in × r` and `up: r × d_out`
//! and contributes `(α/r)·x·down·up`.

use std::collections::BTreeMap;

use rand::Rng;

use crate::error::{Error, Result};
use crate::numerics::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct LoraAdapter {
    pub target_weight_name: String,
    pub down: Tensor,
    pub up: Tensor,
    pub rank: usize,
    pub alpha: f32,
}

impl LoraAdapter {
    /// Gaussian `down`, zero `up`: the adapter starts as an exact no-op.
    pub fn new<R: Rng + ?Sized>(target: &str, d_in: usize, d_out: usize, rank: usize, alpha: f32, rng: &mut R) -> Self {
        Self {
            target_weight_name: target.to_string(),
            down: Tensor::randn(&[d_in, rank], 1.0 / (d_in as f64).sqrt(), rng),
            up: Tensor::zeros(&[rank, d_out]),
            rank,
            alpha,
        }
    }

    pub fn scaling(&self) -> f32 {
        self.alpha / self.rank as f32
    }

    fn check(&self, base: &Tensor) -> Result<()> {
        let ds = self.down.shape();
        let us = self.up.shape();
        let bs = base.shape();
        if bs.len() != 2 || ds != [bs[0], self.rank] || us != [self.rank, bs[1]] {
            return Err(Error::ShapeMismatch {
                op: "lora",
                left: bs.to_vec(),
                right: vec![ds[0], self.rank, us.get(1).copied().unwrap_or(0)],
            });
        }
        Ok(())
    }

    /// `(α/r)·down·up`, the dense update this adapter represents.
    pub fn delta(&self) -> Result<Tensor> {
        Ok(self.down.matmul(&self.up)?.scale(self.scaling()))
    }
}

/// `x·W + (α/r)·(x·down)·up`.
pub fn lora_apply(base: &Tensor, adapter: &LoraAdapter, x: &Tensor) -> Result<Tensor> {
    adapter.check(base)?;
    let y = x.matmul(base)?;
    let low = x.matmul(&adapter.down)?.matmul(&adapter.up)?.scale(adapter.scaling());
    y.add(&low)
}

/// `W + (α/r)·down·up`.
pub fn merge_lora(base: &Tensor, adapter: &LoraAdapter) -> Result<Tensor> {
    adapter.check(base)?;
    base.add(&adapter.delta()?)
}

/// Adapters keyed by the name of the base weight they modify.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdapterSet {
    pub adapters: BTreeMap<String, LoraAdapter>,
}

impl AdapterSet {
    pub fn get(&self, name: &str) -> Option<&LoraAdapter> {
        self.adapters.get(name)
    }

    pub fn insert(&mut self, adapter: LoraAdapter) {
        self.adapters.insert(adapter.target_weight_name.clone(), adapter);
    }

    pub fn len(&self) -> usize {
        self.adapters.len()
    }

    pub fn is_empty(&self) -> bool {
        self.adapters.is_empty()
    }

    /// Folds every adapter into a copy of `base`.
    pub fn merge_into(&self, base: &BTreeMap<String, Tensor>) -> Result<BTreeMap<String, Tensor>> {
        let mut out = base.clone();
        for (name, a) in &self.adapters {
            let w = out
                .get_mut(name)
                .ok_or_else(|| Error::InvalidArgument(format!("adapter targets unknown weight `{name}`")))?;
            *w = merge_lora(w, a)?;
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn zero_up_is_exactly_base() {
        let mut r = rng(1);
        let w = Tensor::randn(&[8, 6], 0.5, &mut r);
        let a = LoraAdapter::new("w", 8, 6, 2, 4.0, &mut r);
        let x = Tensor::randn(&[3, 8], 1.0, &mut r);
        assert_eq!(lora_apply(&w, &a, &x).unwrap(), x.matmul(&w).unwrap());
        assert_eq!(merge_lora(&w, &a).unwrap(), w);
    }

    #[test]
    fn full_rank_factorization_reproduces_any_update() {
        // rank = d, down = I, up = (r/α)(W' − W) ⇒ effective weight is W'.
        let mut r = rng(2);
        let w = Tensor::randn(&[4, 4], 1.0, &mut r);
        let target = Tensor::randn(&[4, 4], 1.0, &mut r);
        let alpha = 2.0;
        let a = LoraAdapter {
            target_weight_name: "w".into(),
            down: Tensor::eye(4),
            up: target.sub(&w).unwrap().scale(4.0 / alpha),
            rank: 4,
            alpha,
        };
        let x = Tensor::randn(&[5, 4], 1.0, &mut r);
        let got = lora_apply(&w, &a, &x).unwrap();
        let want = x.matmul(&target).unwrap();
        assert!(got.max_abs_diff(&want) < 1e-5);
    }

    #[test]
    fn doubling_alpha_and_halving_up_commutes() {
        let mut r = rng(3);
        let w = Tensor::randn(&[6, 5], 1.0, &mut r);
        let mut a = LoraAdapter::new("w", 6, 5, 3, 3.0, &mut r);
        a.up = Tensor::randn(&[3, 5], 1.0, &mut r);
        let mut b = a.clone();
        b.alpha *= 2.0;
        b.up = b.up.scale(0.5);
        let x = Tensor::randn(&[4, 6], 1.0, &mut r);
        let d = lora_apply(&w, &a, &x)
            .unwrap()
            .max_abs_diff(&lora_apply(&w, &b, &x).unwrap());
        assert!(d < 1e-6, "{d}");
    }

    #[test]
    fn merged_weight_matches_adapter_forward() {
        let mut r = rng(4);
        let w = Tensor::randn(&[8, 8], 1.0, &mut r);
        let mut a = LoraAdapter::new("w", 8, 8, 4, 8.0, &mut r);
        a.up = Tensor::randn(&[4, 8], 1.0, &mut r);
        let merged = merge_lora(&w, &a).unwrap();
        for _ in 0..100 {
            let x = Tensor::randn(&[1, 8], 1.0, &mut r);
            let d = x
                .matmul(&merged)
                .unwrap()
                .max_abs_diff(&lora_apply(&w, &a, &x).unwrap());
            assert!(d < 1e-5, "{d}");
        }
        let back = merged.sub(&a.delta().unwrap()).unwrap();
        assert!(back.max_abs_diff(&w) < 1e-6);
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let mut r = rng(5);
        let w = Tensor::randn(&[8, 8], 1.0, &mut r);
        let a = LoraAdapter::new("w", 6, 8, 2, 2.0, &mut r);
        assert!(matches!(merge_lora(&w, &a), Err(Error::ShapeMismatch { .. })));
        let x = Tensor::randn(&[2, 8], 1.0, &mut r);
        assert!(lora_apply(&w, &a, &x).is_err());
    }
}
