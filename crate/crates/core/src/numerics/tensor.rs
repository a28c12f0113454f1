use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dense row-major matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor2 {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Tensor2 {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Tensor2 {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn filled(rows: usize, cols: usize, v: f64) -> Self {
        Tensor2 {
            rows,
            cols,
            data: vec![v; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Dimension {
                op: "from_vec",
                left: (rows, cols),
                right: (data.len(), 1),
            });
        }
        Ok(Tensor2 { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            if r.len() != cols {
                return Err(Error::Dimension {
                    op: "from_rows",
                    left: (rows.len(), cols),
                    right: (1, r.len()),
                });
            }
            data.extend_from_slice(r);
        }
        Ok(Tensor2 {
            rows: rows.len(),
            cols,
            data,
        })
    }

    pub fn row_vector(v: Vec<f64>) -> Self {
        Tensor2 {
            rows: 1,
            cols: v.len(),
            data: v,
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Tensor2::zeros(n, n);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn matmul(&self, b: &Tensor2) -> Result<Tensor2> {
        if self.cols != b.rows {
            return Err(Error::Dimension {
                op: "matmul",
                left: self.shape(),
                right: b.shape(),
            });
        }
        let mut out = Tensor2::zeros(self.rows, b.cols);
        for i in 0..self.rows {
            let orow = &mut out.data[i * b.cols..(i + 1) * b.cols];
            for k in 0..self.cols {
                let a = self.data[i * self.cols + k];
                if a == 0.0 {
                    continue;
                }
                let brow = &b.data[k * b.cols..(k + 1) * b.cols];
                for (o, &bv) in orow.iter_mut().zip(brow) {
                    *o += a * bv;
                }
            }
        }
        Ok(out)
    }

    pub fn transpose(&self) -> Tensor2 {
        let mut out = Tensor2::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        out
    }

    pub fn add(&self, b: &Tensor2) -> Result<Tensor2> {
        self.same_shape("add", b)?;
        Ok(self.zip_map(b, |x, y| x + y))
    }

    pub fn add_assign(&mut self, b: &Tensor2) {
        debug_assert_eq!(self.shape(), b.shape());
        for (x, y) in self.data.iter_mut().zip(&b.data) {
            *x += y;
        }
    }

    pub fn add_bias(&self, bias: &Tensor2) -> Result<Tensor2> {
        if bias.rows != 1 || bias.cols != self.cols {
            return Err(Error::Dimension {
                op: "add_bias",
                left: self.shape(),
                right: bias.shape(),
            });
        }
        let mut out = self.clone();
        for r in 0..out.rows {
            for (x, b) in out.row_mut(r).iter_mut().zip(&bias.data) {
                *x += b;
            }
        }
        Ok(out)
    }

    pub fn scale(&self, c: f64) -> Tensor2 {
        self.map(|x| x * c)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor2 {
        Tensor2 {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    fn zip_map(&self, b: &Tensor2, f: impl Fn(f64, f64) -> f64) -> Tensor2 {
        Tensor2 {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&b.data).map(|(&x, &y)| f(x, y)).collect(),
        }
    }

    pub fn leaky_relu(&self, slope: f64) -> Tensor2 {
        self.map(|x| if x > 0.0 { x } else { slope * x })
    }

    /// Row softmax with max-shift. Entries where `mask` is true are excluded
    /// (probability 0); a fully masked row is an error.
    pub fn softmax_rows(&self, mask: Option<&[bool]>) -> Result<Tensor2> {
        if let Some(m) = mask {
            if m.len() != self.data.len() {
                return Err(Error::Dimension {
                    op: "softmax_rows mask",
                    left: self.shape(),
                    right: (m.len(), 1),
                });
            }
        }
        let mut out = Tensor2::zeros(self.rows, self.cols);
        for r in 0..self.rows {
            let keep = |c: usize| mask.map_or(true, |m| !m[r * self.cols + c]);
            let row = self.row(r);
            let max = (0..self.cols)
                .filter(|&c| keep(c))
                .map(|c| row[c])
                .fold(f64::NEG_INFINITY, f64::max);
            if max == f64::NEG_INFINITY {
                return Err(Error::State(format!("softmax row {r} has no unmasked entries")));
            }
            let orow = out.row_mut(r);
            let mut z = 0.0;
            for c in 0..row.len() {
                if keep(c) {
                    let e = (row[c] - max).exp();
                    orow[c] = e;
                    z += e;
                }
            }
            for v in orow.iter_mut() {
                *v /= z;
            }
        }
        Ok(out)
    }

    pub fn concat_cols(parts: &[&Tensor2]) -> Result<Tensor2> {
        let rows = parts.first().map_or(0, |p| p.rows);
        if let Some(bad) = parts.iter().find(|p| p.rows != rows) {
            return Err(Error::Dimension {
                op: "concat_cols",
                left: parts[0].shape(),
                right: bad.shape(),
            });
        }
        let cols: usize = parts.iter().map(|p| p.cols).sum();
        let mut out = Tensor2::zeros(rows, cols);
        for r in 0..rows {
            let mut off = 0;
            for p in parts {
                out.data[r * cols + off..r * cols + off + p.cols].copy_from_slice(p.row(r));
                off += p.cols;
            }
        }
        Ok(out)
    }

    pub fn gather_rows(&self, idx: &[usize]) -> Result<Tensor2> {
        let mut out = Tensor2::zeros(idx.len(), self.cols);
        for (o, &i) in idx.iter().enumerate() {
            if i >= self.rows {
                return Err(Error::Dimension {
                    op: "gather_rows",
                    left: self.shape(),
                    right: (i, 0),
                });
            }
            out.row_mut(o).copy_from_slice(self.row(i));
        }
        Ok(out)
    }

    fn same_shape(&self, op: &'static str, b: &Tensor2) -> Result<()> {
        if self.shape() != b.shape() {
            return Err(Error::Dimension {
                op,
                left: self.shape(),
                right: b.shape(),
            });
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn softmax_symmetric_row() {
        let t = Tensor2::from_rows(&[vec![0.0, 0.0]]).unwrap();
        assert_eq!(t.softmax_rows(None).unwrap().data, vec![0.5, 0.5]);
    }

    #[test]
    fn leaky_relu_values() {
        let t = Tensor2::from_rows(&[vec![-1.0, 2.0]]).unwrap();
        assert_eq!(t.leaky_relu(0.01).data, vec![-0.01, 2.0]);
    }

    #[test]
    fn identity_matmul() {
        let a = Tensor2::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0], vec![5.0, 6.0]]).unwrap();
        assert_eq!(Tensor2::identity(3).matmul(&a).unwrap(), a);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let a = Tensor2::zeros(2, 3);
        let err = a.matmul(&Tensor2::zeros(2, 3)).unwrap_err();
        assert!(err.to_string().contains("(2, 3) vs (2, 3)"), "{err}");
    }

    #[test]
    fn softmax_mask_excludes_entries() {
        let t = Tensor2::from_rows(&[vec![5.0, 1.0, 1.0]]).unwrap();
        let s = t.softmax_rows(Some(&[true, false, false])).unwrap();
        assert_eq!(s.data, vec![0.0, 0.5, 0.5]);
        assert!(t.softmax_rows(Some(&[true, true, true])).is_err());
    }

    #[test]
    fn softmax_large_inputs_stay_finite() {
        let t = Tensor2::from_rows(&[vec![1e300, -1e300, 7e299]]).unwrap();
        assert!(t.softmax_rows(None).unwrap().is_finite());
    }

    proptest! {
        #[test]
        fn softmax_rows_normalized_and_shift_invariant(
            row in prop::collection::vec(-50.0f64..50.0, 1..12),
            shift in -100.0f64..100.0,
        ) {
            let t = Tensor2::row_vector(row.clone());
            let s = t.softmax_rows(None).unwrap();
            prop_assert!((s.sum() - 1.0).abs() < 1e-12);
            let shifted = Tensor2::row_vector(row.iter().map(|x| x + shift).collect());
            let s2 = shifted.softmax_rows(None).unwrap();
            for (a, b) in s.data.iter().zip(&s2.data) {
                prop_assert!((a - b).abs() < 1e-12);
            }
        }
    }
}
