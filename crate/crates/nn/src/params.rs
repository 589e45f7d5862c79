use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{NnError, Result};
use crate::tape::{Gradients, Tape, Var};

/// Index of a tensor inside a [`ParamSet`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ParamId(pub usize);

/// Flat, ordered collection of trainable matrices.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    tensors: Vec<Array2<f64>>,
}

/// Leaves for every tensor of a [`ParamSet`], recorded on one tape.
#[derive(Clone, Debug)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, t: Array2<f64>) -> ParamId {
        self.tensors.push(t);
        ParamId(self.tensors.len() - 1)
    }

    /// Uniform init in `[-bound, bound]`.
    pub fn push_uniform(&mut self, rows: usize, cols: usize, bound: f64, rng: &mut impl Rng) -> ParamId {
        let t = Array2::from_shape_fn((rows, cols), |_| rng.random_range(-bound..=bound));
        self.push(t)
    }

    pub fn get(&self, id: ParamId) -> &Array2<f64> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Array2<f64> {
        &mut self.tensors[id.0]
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Array2<f64>> {
        self.tensors.iter()
    }

    pub fn shapes(&self) -> Vec<(usize, usize)> {
        self.tensors.iter().map(|t| t.dim()).collect()
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(|t| t.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(|t| t.iter().all(|x| x.is_finite()))
    }

    /// Records every tensor as a leaf on `tape`.
    pub fn bind(&self, tape: &mut Tape) -> Bound {
        Bound { vars: self.tensors.iter().map(|t| tape.leaf(t.clone())).collect() }
    }

    /// Records every tensor as a constant: no gradients flow into it.
    pub fn bind_constant(&self, tape: &mut Tape) -> Bound {
        Bound { vars: self.tensors.iter().map(|t| tape.constant(t.clone())).collect() }
    }

    /// Gradients for every tensor, zero-filled where the output did not depend on it.
    pub fn grads(&self, bound: &Bound, grads: &Gradients) -> Vec<Array2<f64>> {
        self.tensors
            .iter()
            .zip(&bound.vars)
            .map(|(t, v)| grads.get_or_zeros(*v, t.dim()))
            .collect()
    }

    /// All scalars in tensor order, row-major.
    pub fn flatten(&self) -> Vec<f64> {
        self.tensors.iter().flat_map(|t| t.iter().copied()).collect()
    }

    pub fn set_flat(&mut self, flat: &[f64]) {
        assert_eq!(flat.len(), self.num_scalars(), "set_flat: length mismatch");
        let mut off = 0;
        for t in &mut self.tensors {
            for x in t.iter_mut() {
                *x = flat[off];
                off += 1;
            }
        }
    }

    /// Polyak averaging: `self <- (1 - tau) * self + tau * source`.
    pub fn soft_update_from(&mut self, source: &ParamSet, tau: f64) {
        assert_eq!(self.shapes(), source.shapes(), "soft_update: shape mismatch");
        for (t, s) in self.tensors.iter_mut().zip(&source.tensors) {
            t.zip_mut_with(s, |x, &y| *x = (1.0 - tau) * *x + tau * y);
        }
    }

    /// Writes all scalars as little-endian `f64` to `path`. Shapes are not
    /// stored; [`ParamSet::read_blob`] takes them from the caller's manifest.
    pub fn write_blob(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        for x in self.tensors.iter().flat_map(|t| t.iter()) {
            w.write_all(&x.to_le_bytes())?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_blob(path: &Path, shapes: &[(usize, usize)]) -> Result<Self> {
        let mut bytes = Vec::new();
        BufReader::new(File::open(path)?).read_to_end(&mut bytes)?;
        let expected: usize = shapes.iter().map(|(r, c)| r * c).sum::<usize>() * 8;
        if bytes.len() != expected {
            return Err(NnError::Blob(format!(
                "{}: expected {expected} bytes for {} tensors, found {}",
                path.display(),
                shapes.len(),
                bytes.len()
            )));
        }
        let mut chunks = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")));
        let mut tensors = Vec::with_capacity(shapes.len());
        for &(r, c) in shapes {
            let data: Vec<f64> = chunks.by_ref().take(r * c).collect();
            tensors.push(Array2::from_shape_vec((r, c), data).expect("blob shape"));
        }
        Ok(Self { tensors })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;

    proptest! {
        #[test]
        fn blob_round_trip_is_lossless(seed in 0u64..1000, rows in 1usize..5, cols in 1usize..5) {
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let mut p = ParamSet::new();
            p.push_uniform(rows, cols, 3.0, &mut rng);
            p.push_uniform(1, cols, 1e-300, &mut rng);
            let dir = tempfile::tempdir().unwrap();
            let path = dir.path().join("p.bin");
            p.write_blob(&path).unwrap();
            let q = ParamSet::read_blob(&path, &p.shapes()).unwrap();
            prop_assert_eq!(p, q);
        }
    }

    #[test]
    fn truncated_blob_is_rejected() {
        let mut p = ParamSet::new();
        p.push(Array2::ones((2, 2)));
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.bin");
        p.write_blob(&path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
        assert!(ParamSet::read_blob(&path, &p.shapes()).is_err());
    }

    #[test]
    fn soft_update_interpolates() {
        let mut a = ParamSet::new();
        a.push(Array2::zeros((1, 2)));
        let mut b = ParamSet::new();
        b.push(Array2::ones((1, 2)));
        a.soft_update_from(&b, 0.25);
        assert_eq!(a.get(ParamId(0))[[0, 1]], 0.25);
    }
}
