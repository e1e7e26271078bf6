//! Per-sample store of cluster-assignment probabilities, updated with
//! momentum and sampled uniformly for contrastive negatives.

use std::io::{Read, Write};
use std::path::Path;

use ndarray::{Array2, ArrayView1};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::critics::check_simplex;
use crate::error::{invalid, io_err, CrlcError, Result};

const BANK_MAGIC: &[u8; 8] = b"CRLCBANK";

/// Default momentum of the bank update.
pub const DEFAULT_MOMENTUM: f64 = 0.5;

#[derive(Debug, Clone)]
pub struct MemoryBank {
    rows: Array2<f64>,
    momentum: f64,
    rng: ChaCha8Rng,
}

impl MemoryBank {
    /// Every row starts at the uniform distribution.
    pub fn new(n: usize, classes: usize, momentum: f64, seed: u64) -> Result<Self> {
        if n < 1 {
            return Err(invalid("memory bank needs at least one row"));
        }
        if classes < 2 {
            return Err(invalid(format!("memory bank needs at least 2 classes, got {classes}")));
        }
        check_momentum(momentum)?;
        Ok(Self {
            rows: Array2::from_elem((n, classes), 1.0 / classes as f64),
            momentum,
            rng: ChaCha8Rng::seed_from_u64(seed),
        })
    }

    pub fn len(&self) -> usize {
        self.rows.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.nrows() == 0
    }

    pub fn classes(&self) -> usize {
        self.rows.ncols()
    }

    pub fn momentum(&self) -> f64 {
        self.momentum
    }

    pub fn row(&self, n: usize) -> ArrayView1<'_, f64> {
        self.rows.row(n)
    }

    /// `row_n <- momentum * row_n + (1 - momentum) * fresh`.
    pub fn update(&mut self, n: usize, fresh: &[f64]) -> Result<()> {
        if n >= self.len() {
            return Err(CrlcError::IndexOutOfRange { index: n, len: self.len() });
        }
        if fresh.len() != self.classes() {
            return Err(CrlcError::DimensionMismatch {
                expected: self.classes(),
                actual: fresh.len(),
                context: "memory bank update",
            });
        }
        check_simplex(fresh)?;
        let a = self.momentum;
        for (old, &new) in self.rows.row_mut(n).iter_mut().zip(fresh) {
            *old = a * *old + (1.0 - a) * new;
        }
        Ok(())
    }

    /// Draws `m - 1` row indices uniformly with replacement from every index
    /// except `exclude`. The caller supplies the positive as candidate one.
    pub fn sample_negative_indices(&mut self, m: usize, exclude: usize) -> Result<Vec<usize>> {
        let n = self.len();
        if m < 1 {
            return Err(invalid("need at least one candidate"));
        }
        if exclude >= n {
            return Err(CrlcError::IndexOutOfRange { index: exclude, len: n });
        }
        if n < 2 {
            return Err(invalid("cannot sample negatives from a single-row memory bank"));
        }
        Ok((1..m)
            .map(|_| {
                let k = self.rng.gen_range(0..n - 1);
                if k >= exclude {
                    k + 1
                } else {
                    k
                }
            })
            .collect())
    }

    pub fn sample_negatives(&mut self, m: usize, exclude: usize) -> Result<Vec<(usize, Vec<f64>)>> {
        let idx = self.sample_negative_indices(m, exclude)?;
        Ok(idx.into_iter().map(|i| (i, self.rows.row(i).to_vec())).collect())
    }

    /// Binary checkpoint: magic, `N` and `C` as u64, momentum as f64, then the
    /// rows as row-major f64, all little endian. The sampler state is not saved.
    pub fn write_to(&self, mut w: impl Write) -> std::io::Result<()> {
        w.write_all(BANK_MAGIC)?;
        w.write_all(&(self.len() as u64).to_le_bytes())?;
        w.write_all(&(self.classes() as u64).to_le_bytes())?;
        w.write_all(&self.momentum.to_le_bytes())?;
        for v in self.rows.iter() {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_from(mut r: impl Read, seed: u64) -> Result<Self> {
        let schema = |e: std::io::Error| CrlcError::Schema(format!("truncated memory bank checkpoint: {e}"));
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(schema)?;
        if &magic != BANK_MAGIC {
            return Err(CrlcError::Schema("not a memory bank checkpoint".into()));
        }
        let mut b = [0u8; 8];
        r.read_exact(&mut b).map_err(schema)?;
        let n = u64::from_le_bytes(b) as usize;
        r.read_exact(&mut b).map_err(schema)?;
        let c = u64::from_le_bytes(b) as usize;
        r.read_exact(&mut b).map_err(schema)?;
        let momentum = f64::from_le_bytes(b);
        let mut bank = Self::new(n, c, momentum, seed)?;
        for v in bank.rows.iter_mut() {
            r.read_exact(&mut b).map_err(schema)?;
            *v = f64::from_le_bytes(b);
        }
        for row in bank.rows.outer_iter() {
            check_simplex(&row.to_vec()).map_err(|e| CrlcError::Schema(e.to_string()))?;
        }
        Ok(bank)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(io_err(path))?;
        let mut w = std::io::BufWriter::new(file);
        self.write_to(&mut w).and_then(|_| w.flush()).map_err(io_err(path))
    }

    pub fn load(path: &Path, seed: u64) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(io_err(path))?;
        Self::read_from(std::io::BufReader::new(file), seed)
    }
}

fn check_momentum(a: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&a) {
        return Err(invalid(format!("momentum must lie in [0, 1], got {a}")));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn init_is_uniform() {
        let bank = MemoryBank::new(3, 2, 0.5, 1).unwrap();
        for n in 0..3 {
            assert_eq!(bank.row(n).to_vec(), vec![0.5, 0.5]);
        }
        let bank = MemoryBank::new(7, 5, 0.5, 1).unwrap();
        assert!(bank.rows.outer_iter().all(|r| (r.sum() - 1.0).abs() < 1e-15));
        assert!(MemoryBank::new(0, 2, 0.5, 1).is_err());
        assert!(MemoryBank::new(3, 1, 0.5, 1).is_err());
        assert!(MemoryBank::new(3, 2, 1.5, 1).is_err());
    }

    #[test]
    fn update_examples() {
        let mut bank = MemoryBank::new(2, 2, 0.5, 1).unwrap();
        bank.update(0, &[1.0, 0.0]).unwrap();
        assert_eq!(bank.row(0).to_vec(), vec![0.75, 0.25]);
        let mut frozen = MemoryBank::new(2, 2, 1.0, 1).unwrap();
        frozen.update(1, &[1.0, 0.0]).unwrap();
        assert_eq!(frozen.row(1).to_vec(), vec![0.5, 0.5]);
        let mut replace = MemoryBank::new(2, 2, 0.0, 1).unwrap();
        replace.update(1, &[0.3, 0.7]).unwrap();
        assert_eq!(replace.row(1).to_vec(), vec![0.3, 0.7]);
        assert!(matches!(bank.update(2, &[1.0, 0.0]), Err(CrlcError::IndexOutOfRange { .. })));
        assert!(bank.update(0, &[0.4, 0.4]).is_err());
    }

    #[test]
    fn sampling_examples() {
        let mut bank = MemoryBank::new(2, 3, 0.5, 9).unwrap();
        assert_eq!(bank.sample_negative_indices(4, 0).unwrap(), vec![1, 1, 1]);
        assert!(bank.sample_negative_indices(1, 0).unwrap().is_empty());
        let mut a = MemoryBank::new(50, 3, 0.5, 42).unwrap();
        let mut b = MemoryBank::new(50, 3, 0.5, 42).unwrap();
        assert_eq!(a.sample_negative_indices(64, 3).unwrap(), b.sample_negative_indices(64, 3).unwrap());
        let mut single = MemoryBank::new(1, 3, 0.5, 0).unwrap();
        assert!(single.sample_negative_indices(3, 0).is_err());
        assert!(a.sample_negative_indices(3, 50).is_err());
    }

    #[test]
    fn sampling_is_uniform_over_other_rows() {
        let mut bank = MemoryBank::new(10, 2, 0.5, 2024).unwrap();
        let draws = bank.sample_negative_indices(100_001, 4).unwrap();
        let mut counts = [0usize; 10];
        for d in &draws {
            counts[*d] += 1;
        }
        assert_eq!(counts[4], 0);
        for (i, &c) in counts.iter().enumerate().filter(|(i, _)| *i != 4) {
            let freq = c as f64 / draws.len() as f64;
            assert!((freq - 1.0 / 9.0).abs() <= 0.02 / 9.0, "index {i}: {freq}");
        }
    }

    #[test]
    fn checkpoint_roundtrip() {
        let mut bank = MemoryBank::new(4, 3, 0.5, 0).unwrap();
        bank.update(2, &[0.2, 0.3, 0.5]).unwrap();
        let mut buf = Vec::new();
        bank.write_to(&mut buf).unwrap();
        assert_eq!(buf.len(), 8 + 8 + 8 + 8 + 4 * 3 * 8);
        let back = MemoryBank::read_from(buf.as_slice(), 0).unwrap();
        assert_eq!(back.rows, bank.rows);
        assert_eq!(back.momentum, 0.5);
        assert!(MemoryBank::read_from(&buf[..20], 0).is_err());
        assert!(MemoryBank::read_from(&b"NOTABANKxxxxxxxxxxxxxxxxxxxxxxxxxxx"[..], 0).is_err());
    }

    fn simplex(c: usize) -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(0.001f64..1.0, c).prop_map(|raw| {
            let s: f64 = raw.iter().sum();
            raw.iter().map(|v| v / s).collect()
        })
    }

    proptest! {
        #[test]
        fn updates_stay_on_simplex_and_contract(
            alpha in 0.0f64..=1.0,
            updates in prop::collection::vec((0usize..6, simplex(4)), 1..40),
        ) {
            let mut bank = MemoryBank::new(6, 4, alpha, 3).unwrap();
            for (n, fresh) in &updates {
                let before: Vec<f64> = bank.row(*n).to_vec();
                bank.update(*n, fresh).unwrap();
                let after = bank.row(*n).to_vec();
                prop_assert!(check_simplex(&after).is_ok());
                let d0 = before.iter().zip(fresh).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
                let d1 = after.iter().zip(fresh).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
                prop_assert!((d1 - alpha * d0).abs() < 1e-12);
            }
        }

        #[test]
        fn sampling_never_returns_excluded(n in 2usize..30, m in 1usize..50, ex_seed in 0usize..1000, seed in 0u64..1000) {
            let exclude = ex_seed % n;
            let mut bank = MemoryBank::new(n, 2, 0.5, seed).unwrap();
            let idx = bank.sample_negative_indices(m, exclude).unwrap();
            prop_assert_eq!(idx.len(), m - 1);
            prop_assert!(idx.iter().all(|&i| i != exclude && i < n));
        }
    }
}
