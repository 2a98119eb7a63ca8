use std::fmt;

use crate::error::{MooseError, Result};

/// Boolean attention pattern: `true` means the query may attend to the key.
/// Every row keeps at least one allowed entry.
#[derive(Clone, PartialEq, Eq)]
pub struct AttentionMask {
    rows: usize,
    cols: usize,
    allowed: Vec<bool>,
}

impl AttentionMask {
    pub fn new(rows: usize, cols: usize, allowed: Vec<bool>) -> Result<Self> {
        if rows == 0 || cols == 0 || allowed.len() != rows * cols {
            return Err(MooseError::invalid(format!(
                "mask of {} entries does not fit {rows}x{cols}",
                allowed.len()
            )));
        }
        if let Some(r) = (0..rows).find(|&r| !allowed[r * cols..(r + 1) * cols].contains(&true)) {
            return Err(MooseError::FullyMaskedRow { row: r });
        }
        Ok(AttentionMask {
            rows,
            cols,
            allowed,
        })
    }

    pub fn from_fn(rows: usize, cols: usize, f: impl Fn(usize, usize) -> bool) -> Result<Self> {
        let allowed = (0..rows * cols).map(|k| f(k / cols, k % cols)).collect();
        AttentionMask::new(rows, cols, allowed)
    }

    /// Skips the row invariant; only for exercising error paths.
    #[cfg(test)]
    pub(crate) fn from_raw(rows: usize, cols: usize, allowed: Vec<bool>) -> Self {
        AttentionMask {
            rows,
            cols,
            allowed,
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn allowed(&self, i: usize, j: usize) -> bool {
        self.allowed[i * self.cols + j]
    }

    pub fn row(&self, i: usize) -> &[bool] {
        &self.allowed[i * self.cols..(i + 1) * self.cols]
    }

    pub fn count_allowed(&self) -> usize {
        self.allowed.iter().filter(|&&a| a).count()
    }

    pub fn transposed(&self) -> AttentionMask {
        let mut allowed = vec![false; self.allowed.len()];
        for i in 0..self.rows {
            for j in 0..self.cols {
                allowed[j * self.rows + i] = self.allowed(i, j);
            }
        }
        AttentionMask {
            rows: self.cols,
            cols: self.rows,
            allowed,
        }
    }

    pub fn is_symmetric(&self) -> bool {
        self.rows == self.cols && *self == self.transposed()
    }
}

impl fmt::Debug for AttentionMask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "AttentionMask {}x{}", self.rows, self.cols)?;
        for i in 0..self.rows {
            let line: String = self
                .row(i)
                .iter()
                .map(|&a| if a { '1' } else { '.' })
                .collect();
            writeln!(f, "  {line}")?;
        }
        Ok(())
    }
}

/// Cross-modal mask over two `(N + 1)`-token sequences: the cls row and
/// column see everything, patch `i` sees only its counterpart patch `i`.
pub fn build_arrow_mask(num_patches: usize) -> Result<AttentionMask> {
    if num_patches == 0 {
        return Err(MooseError::invalid("arrow mask needs at least one patch"));
    }
    let s = num_patches + 1;
    AttentionMask::from_fn(s, s, |i, j| i == 0 || j == 0 || i == j)
}

/// Lower-triangular mask: position `i` sees positions `0..=i`.
pub fn build_causal_mask(len: usize) -> Result<AttentionMask> {
    if len == 0 {
        return Err(MooseError::invalid("causal mask needs a positive length"));
    }
    AttentionMask::from_fn(len, len, |i, j| j <= i)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn arrow_mask_two_patches() {
        let m = build_arrow_mask(2).unwrap();
        let expected = [(0, 0), (0, 1), (0, 2), (1, 0), (2, 0), (1, 1), (2, 2)];
        for i in 0..3 {
            for j in 0..3 {
                assert_eq!(m.allowed(i, j), expected.contains(&(i, j)), "({i},{j})");
            }
        }
        assert_eq!(m.count_allowed(), 7);
    }

    #[test]
    fn arrow_mask_single_patch_is_full() {
        assert_eq!(build_arrow_mask(1).unwrap().count_allowed(), 4);
        assert!(build_arrow_mask(0).is_err());
    }

    #[test]
    fn arrow_popcount_by_enumeration() {
        for n in 1..=16 {
            let m = build_arrow_mask(n).unwrap();
            let mut count = 0;
            for i in 0..=n {
                for j in 0..=n {
                    if m.allowed(i, j) {
                        count += 1;
                    }
                }
            }
            assert_eq!(count, 3 * n + 1);
            assert!(m.is_symmetric());
        }
    }

    #[test]
    fn causal_mask_rows() {
        let m = build_causal_mask(3).unwrap();
        assert_eq!(m.count_allowed(), 6);
        for i in 0..3 {
            assert_eq!(m.row(i).iter().filter(|&&a| a).count(), i + 1);
        }
        let one = build_causal_mask(1).unwrap();
        assert!(one.allowed(0, 0));
    }

    #[test]
    fn constructor_rejects_empty_row() {
        assert!(AttentionMask::from_fn(2, 2, |i, _| i == 0).is_err());
    }
}
