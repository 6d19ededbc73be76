//! Systematic k-of-m erasure code over GF(2^8).
//!
//! Same construction as zfec: a Vandermonde matrix evaluated at `0` and
//! `a^0 .. a^(m-2)`, right-multiplied by the inverse of its top `k x k`
//! square so the first `k` output blocks are the input blocks unchanged.
//! Any `k` distinct rows of the result are invertible, so any `k` blocks
//! reconstruct the data.

use thiserror::Error;

/// x^8 + x^4 + x^3 + x^2 + 1
const POLY: u16 = 0x11d;

struct Tables {
    exp: [u8; 512],
    log: [u8; 256],
}

const fn build_tables() -> Tables {
    let mut exp = [0u8; 512];
    let mut log = [0u8; 256];
    let mut x: u16 = 1;
    let mut i = 0;
    while i < 255 {
        exp[i] = x as u8;
        log[x as usize] = i as u8;
        x <<= 1;
        if x & 0x100 != 0 {
            x ^= POLY;
        }
        i += 1;
    }
    while i < 512 {
        exp[i] = exp[i - 255];
        i += 1;
    }
    Tables { exp, log }
}

static TABLES: Tables = build_tables();

pub mod gf {
    use super::TABLES;

    #[inline]
    pub fn mul(a: u8, b: u8) -> u8 {
        if a == 0 || b == 0 {
            return 0;
        }
        TABLES.exp[TABLES.log[a as usize] as usize + TABLES.log[b as usize] as usize]
    }

    /// Multiplicative inverse. Panics on zero.
    #[inline]
    pub fn inv(a: u8) -> u8 {
        assert!(a != 0, "zero has no inverse in GF(256)");
        TABLES.exp[255 - TABLES.log[a as usize] as usize]
    }

    #[inline]
    pub fn exp(power: usize) -> u8 {
        TABLES.exp[power % 255]
    }

    pub fn pow(a: u8, n: usize) -> u8 {
        if n == 0 {
            return 1;
        }
        if a == 0 {
            return 0;
        }
        TABLES.exp[(TABLES.log[a as usize] as usize * n) % 255]
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum CodeError {
    #[error("need 1 <= k <= m <= 256, got k={k} m={m}")]
    Dimensions { k: usize, m: usize },
    #[error("expected {expected} blocks of equal length")]
    BlockShape { expected: usize },
    #[error("block index {index} out of range for m={m}")]
    IndexOutOfRange { index: usize, m: usize },
    #[error("only {have} distinct blocks, need {need}")]
    InsufficientBlocks { have: usize, need: usize },
}

/// Row-major square matrix inverse by Gauss-Jordan elimination.
/// Returns `None` when singular.
fn invert(mut a: Vec<u8>, n: usize) -> Option<Vec<u8>> {
    let mut inv = vec![0u8; n * n];
    for i in 0..n {
        inv[i * n + i] = 1;
    }
    for col in 0..n {
        let pivot = (col..n).find(|&r| a[r * n + col] != 0)?;
        if pivot != col {
            for j in 0..n {
                a.swap(pivot * n + j, col * n + j);
                inv.swap(pivot * n + j, col * n + j);
            }
        }
        let scale = gf::inv(a[col * n + col]);
        for j in 0..n {
            a[col * n + j] = gf::mul(a[col * n + j], scale);
            inv[col * n + j] = gf::mul(inv[col * n + j], scale);
        }
        for r in 0..n {
            let factor = a[r * n + col];
            if r == col || factor == 0 {
                continue;
            }
            for j in 0..n {
                a[r * n + j] ^= gf::mul(factor, a[col * n + j]);
                inv[r * n + j] ^= gf::mul(factor, inv[col * n + j]);
            }
        }
    }
    Some(inv)
}

#[derive(Debug, Clone)]
pub struct ErasureCode {
    k: usize,
    m: usize,
    /// m x k generator, rows 0..k are the identity.
    matrix: Vec<u8>,
}

impl ErasureCode {
    pub fn new(k: usize, m: usize) -> Result<Self, CodeError> {
        if k == 0 || k > m || m > 256 {
            return Err(CodeError::Dimensions { k, m });
        }
        // row 0 evaluates at zero, row r at a^(r-1)
        let mut vander = vec![0u8; m * k];
        vander[0] = 1;
        for r in 1..m {
            let x = gf::exp(r - 1);
            for c in 0..k {
                vander[r * k + c] = gf::pow(x, c);
            }
        }
        let top_inv = invert(vander[..k * k].to_vec(), k).expect("vandermonde top square is invertible");
        let mut matrix = vec![0u8; m * k];
        for r in 0..m {
            for c in 0..k {
                let mut acc = 0u8;
                for j in 0..k {
                    acc ^= gf::mul(vander[r * k + j], top_inv[j * k + c]);
                }
                matrix[r * k + c] = acc;
            }
        }
        Ok(ErasureCode { k, m, matrix })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn m(&self) -> usize {
        self.m
    }

    /// Produces all `m` blocks from `k` equally sized data blocks.
    pub fn encode(&self, data: &[Vec<u8>]) -> Result<Vec<Vec<u8>>, CodeError> {
        if data.len() != self.k {
            return Err(CodeError::BlockShape { expected: self.k });
        }
        let len = data[0].len();
        if data.iter().any(|b| b.len() != len) {
            return Err(CodeError::BlockShape { expected: self.k });
        }
        let mut out = data.to_vec();
        for r in self.k..self.m {
            let row = &self.matrix[r * self.k..(r + 1) * self.k];
            let mut block = vec![0u8; len];
            for (coef, src) in row.iter().zip(data) {
                if *coef == 0 {
                    continue;
                }
                for (o, s) in block.iter_mut().zip(src) {
                    *o ^= gf::mul(*coef, *s);
                }
            }
            out.push(block);
        }
        Ok(out)
    }

    /// Recovers the `k` data blocks from any `k` distinct `(index, block)`
    /// pairs. Extra or repeated blocks are ignored; data blocks are
    /// preferred since they need no arithmetic.
    pub fn decode(&self, blocks: &[(usize, &[u8])]) -> Result<Vec<Vec<u8>>, CodeError> {
        let mut chosen: Vec<Option<&[u8]>> = vec![None; self.m];
        for &(index, block) in blocks {
            if index >= self.m {
                return Err(CodeError::IndexOutOfRange { index, m: self.m });
            }
            chosen[index].get_or_insert(block);
        }
        let distinct = chosen.iter().filter(|b| b.is_some()).count();
        if distinct < self.k {
            return Err(CodeError::InsufficientBlocks { have: distinct, need: self.k });
        }
        let picked: Vec<(usize, &[u8])> = chosen
            .iter()
            .enumerate()
            .filter_map(|(i, b)| b.map(|b| (i, b)))
            .take(self.k)
            .collect();
        let len = picked[0].1.len();
        if picked.iter().any(|(_, b)| b.len() != len) {
            return Err(CodeError::BlockShape { expected: self.k });
        }
        if picked.iter().all(|(i, _)| *i < self.k) {
            return Ok(picked.into_iter().map(|(_, b)| b.to_vec()).collect());
        }

        let mut sub = vec![0u8; self.k * self.k];
        for (r, (i, _)) in picked.iter().enumerate() {
            sub[r * self.k..(r + 1) * self.k].copy_from_slice(&self.matrix[i * self.k..(i + 1) * self.k]);
        }
        let dec = invert(sub, self.k).expect("any k rows of the generator are independent");
        let mut out = Vec::with_capacity(self.k);
        for r in 0..self.k {
            let mut block = vec![0u8; len];
            for (c, (_, src)) in picked.iter().enumerate() {
                let coef = dec[r * self.k + c];
                if coef == 0 {
                    continue;
                }
                for (o, s) in block.iter_mut().zip(src.iter()) {
                    *o ^= gf::mul(coef, *s);
                }
            }
            out.push(block);
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Carry-less shift-and-add multiply, reduced by the field polynomial.
    fn slow_mul(mut a: u8, mut b: u8) -> u8 {
        let mut p = 0u8;
        while b != 0 {
            if b & 1 != 0 {
                p ^= a;
            }
            let carry = a & 0x80 != 0;
            a <<= 1;
            if carry {
                a ^= (POLY & 0xff) as u8;
            }
            b >>= 1;
        }
        p
    }

    #[test]
    fn table_multiply_matches_shift_and_add() {
        for a in 0..=255u8 {
            for b in 0..=255u8 {
                assert_eq!(gf::mul(a, b), slow_mul(a, b), "{a} * {b}");
            }
        }
    }

    #[test]
    fn inverses() {
        for a in 1..=255u8 {
            assert_eq!(gf::mul(a, gf::inv(a)), 1);
        }
    }

    #[test]
    fn generator_is_systematic() {
        let code = ErasureCode::new(5, 12).unwrap();
        for r in 0..5 {
            for c in 0..5 {
                assert_eq!(code.matrix[r * 5 + c], u8::from(r == c));
            }
        }
    }

    #[test]
    fn rejects_bad_dimensions() {
        assert!(ErasureCode::new(0, 4).is_err());
        assert!(ErasureCode::new(5, 4).is_err());
        assert!(ErasureCode::new(2, 257).is_err());
    }

    #[test]
    fn too_few_blocks() {
        let code = ErasureCode::new(3, 6).unwrap();
        let data = vec![vec![1u8; 7], vec![2; 7], vec![3; 7]];
        let blocks = code.encode(&data).unwrap();
        let some: Vec<(usize, &[u8])> = vec![(4, &blocks[4]), (4, &blocks[4]), (5, &blocks[5])];
        assert_eq!(code.decode(&some), Err(CodeError::InsufficientBlocks { have: 2, need: 3 }));
        assert_eq!(code.decode(&[(6, &blocks[0][..])]), Err(CodeError::IndexOutOfRange { index: 6, m: 6 }));
    }

    #[test]
    fn largest_exchange_decodes_from_parity_only() {
        let code = ErasureCode::new(13, 126).unwrap();
        let data: Vec<Vec<u8>> = (0..13).map(|i| (0..7).map(|j| (i * 7 + j) as u8).collect()).collect();
        let blocks = code.encode(&data).unwrap();
        let tail: Vec<(usize, &[u8])> = (113..126).map(|i| (i, blocks[i].as_slice())).collect();
        assert_eq!(code.decode(&tail).unwrap(), data);
    }

    proptest! {
        #[test]
        fn random_subsets_reconstruct(
            k in 1usize..20,
            extra in 0usize..40,
            seed in any::<u64>(),
        ) {
            use rand::{seq::SliceRandom, Rng, SeedableRng};
            let m = k + extra;
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let data: Vec<Vec<u8>> = (0..k).map(|_| (0..7).map(|_| rng.gen()).collect()).collect();
            let code = ErasureCode::new(k, m).unwrap();
            let blocks = code.encode(&data).unwrap();
            let mut idx: Vec<usize> = (0..m).collect();
            idx.shuffle(&mut rng);
            let subset: Vec<(usize, &[u8])> = idx[..k].iter().map(|&i| (i, blocks[i].as_slice())).collect();
            prop_assert_eq!(code.decode(&subset).unwrap(), data);
        }
    }
}
