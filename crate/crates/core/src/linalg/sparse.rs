use std::fmt::Write as _;

/// Compressed sparse row matrix with sorted, duplicate-free column indices.
#[derive(Debug, Clone, PartialEq)]
pub struct CsrMatrix {
    nrows: usize,
    ncols: usize,
    row_ptr: Vec<usize>,
    col_idx: Vec<usize>,
    values: Vec<f64>,
}

impl CsrMatrix {
    /// Builds a matrix from `(row, col, value)` triplets; duplicates are summed
    /// and explicit zeros dropped.
    pub fn from_triplets(nrows: usize, ncols: usize, mut triplets: Vec<(usize, usize, f64)>) -> Self {
        triplets.sort_by(|a, b| (a.0, a.1).cmp(&(b.0, b.1)));
        let mut row_ptr = vec![0usize; nrows + 1];
        let mut col_idx = Vec::with_capacity(triplets.len());
        let mut values: Vec<f64> = Vec::with_capacity(triplets.len());
        let mut last: Option<(usize, usize)> = None;
        for (r, c, v) in triplets {
            assert!(r < nrows && c < ncols, "triplet ({r}, {c}) out of bounds");
            if last == Some((r, c)) {
                *values.last_mut().unwrap() += v;
            } else {
                col_idx.push(c);
                values.push(v);
                row_ptr[r + 1] += 1;
                last = Some((r, c));
            }
        }
        for i in 0..nrows {
            row_ptr[i + 1] += row_ptr[i];
        }
        let mut m = CsrMatrix { nrows, ncols, row_ptr, col_idx, values };
        m.drop_zeros();
        m
    }

    pub fn identity(n: usize) -> Self {
        CsrMatrix {
            nrows: n,
            ncols: n,
            row_ptr: (0..=n).collect(),
            col_idx: (0..n).collect(),
            values: vec![1.0; n],
        }
    }

    fn drop_zeros(&mut self) {
        let mut row_ptr = vec![0usize; self.nrows + 1];
        let mut col_idx = Vec::with_capacity(self.col_idx.len());
        let mut values = Vec::with_capacity(self.values.len());
        for i in 0..self.nrows {
            for k in self.row_ptr[i]..self.row_ptr[i + 1] {
                if self.values[k] != 0.0 {
                    col_idx.push(self.col_idx[k]);
                    values.push(self.values[k]);
                }
            }
            row_ptr[i + 1] = col_idx.len();
        }
        self.row_ptr = row_ptr;
        self.col_idx = col_idx;
        self.values = values;
    }

    pub fn nrows(&self) -> usize {
        self.nrows
    }

    pub fn ncols(&self) -> usize {
        self.ncols
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    /// Iterates the stored entries of row `i` as `(col, value)`.
    pub fn row(&self, i: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let range = self.row_ptr[i]..self.row_ptr[i + 1];
        self.col_idx[range.clone()].iter().copied().zip(self.values[range].iter().copied())
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        let range = self.row_ptr[i]..self.row_ptr[i + 1];
        match self.col_idx[range.clone()].binary_search(&j) {
            Ok(k) => self.values[range.start + k],
            Err(_) => 0.0,
        }
    }

    pub fn triplets(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        (0..self.nrows).flat_map(move |i| self.row(i).map(move |(j, v)| (i, j, v)))
    }

    pub fn mul_vec(&self, x: &[f64]) -> Vec<f64> {
        let mut y = vec![0.0; self.nrows];
        self.mul_vec_into(x, &mut y);
        y
    }

    pub fn mul_vec_into(&self, x: &[f64], y: &mut [f64]) {
        assert_eq!(x.len(), self.ncols);
        assert_eq!(y.len(), self.nrows);
        for (i, yi) in y.iter_mut().enumerate() {
            let mut acc = 0.0;
            for k in self.row_ptr[i]..self.row_ptr[i + 1] {
                acc += self.values[k] * x[self.col_idx[k]];
            }
            *yi = acc;
        }
    }

    /// `y = A^T x`.
    pub fn mul_vec_transpose(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.nrows);
        let mut y = vec![0.0; self.ncols];
        for (i, xi) in x.iter().enumerate() {
            for k in self.row_ptr[i]..self.row_ptr[i + 1] {
                y[self.col_idx[k]] += self.values[k] * xi;
            }
        }
        y
    }

    pub fn transpose(&self) -> CsrMatrix {
        CsrMatrix::from_triplets(self.ncols, self.nrows, self.triplets().map(|(i, j, v)| (j, i, v)).collect())
    }

    /// Returns `a * self + b * I`.
    pub fn scaled_shift(&self, a: f64, b: f64) -> CsrMatrix {
        assert_eq!(self.nrows, self.ncols);
        let mut t: Vec<_> = self.triplets().map(|(i, j, v)| (i, j, a * v)).collect();
        t.extend((0..self.nrows).map(|i| (i, i, b)));
        CsrMatrix::from_triplets(self.nrows, self.ncols, t)
    }

    /// Lower and upper bandwidths `(kl, ku)`.
    pub fn bandwidths(&self) -> (usize, usize) {
        let mut kl = 0;
        let mut ku = 0;
        for (i, j, _) in self.triplets() {
            if i > j {
                kl = kl.max(i - j);
            } else {
                ku = ku.max(j - i);
            }
        }
        (kl, ku)
    }

    /// Upper bound on the spectral radius (maximum absolute row sum).
    pub fn gershgorin_radius(&self) -> f64 {
        (0..self.nrows).map(|i| self.row(i).map(|(_, v)| v.abs()).sum::<f64>()).fold(0.0, f64::max)
    }

    pub fn max_abs_diff(&self, other: &CsrMatrix) -> f64 {
        assert_eq!((self.nrows, self.ncols), (other.nrows, other.ncols));
        let mut worst: f64 = 0.0;
        for i in 0..self.nrows {
            let mut cols: Vec<usize> = self.row(i).map(|(j, _)| j).chain(other.row(i).map(|(j, _)| j)).collect();
            cols.sort_unstable();
            cols.dedup();
            for j in cols {
                worst = worst.max((self.get(i, j) - other.get(i, j)).abs());
            }
        }
        worst
    }

    pub fn to_dense(&self) -> Vec<Vec<f64>> {
        let mut d = vec![vec![0.0; self.ncols]; self.nrows];
        for (i, j, v) in self.triplets() {
            d[i][j] = v;
        }
        d
    }

    /// Coordinate text format: a `rows cols nnz` header followed by one
    /// `row col value` line per stored entry (0-based indices).
    pub fn to_coordinate_text(&self) -> String {
        let mut s = String::new();
        writeln!(s, "{} {} {}", self.nrows, self.ncols, self.nnz()).unwrap();
        for (i, j, v) in self.triplets() {
            writeln!(s, "{i} {j} {v:.17e}").unwrap();
        }
        s
    }

    pub fn from_coordinate_text(text: &str) -> Result<Self, crate::Error> {
        let perr = |m: &str| crate::Error::Parse(format!("coordinate matrix: {m}"));
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header: Vec<usize> = lines
            .next()
            .ok_or_else(|| perr("missing header"))?
            .split_whitespace()
            .map(|t| t.parse().map_err(|_| perr("bad header")))
            .collect::<Result<_, _>>()?;
        if header.len() != 3 {
            return Err(perr("header must be `rows cols nnz`"));
        }
        let mut t = Vec::with_capacity(header[2]);
        for line in lines {
            let f: Vec<&str> = line.split_whitespace().collect();
            if f.len() != 3 {
                return Err(perr("entry lines must have three fields"));
            }
            let i: usize = f[0].parse().map_err(|_| perr("bad row"))?;
            let j: usize = f[1].parse().map_err(|_| perr("bad col"))?;
            let v: f64 = f[2].parse().map_err(|_| perr("bad value"))?;
            if i >= header[0] || j >= header[1] {
                return Err(perr("index out of range"));
            }
            t.push((i, j, v));
        }
        if t.len() != header[2] {
            return Err(perr("entry count does not match header"));
        }
        Ok(CsrMatrix::from_triplets(header[0], header[1], t))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn duplicates_are_summed() {
        let m = CsrMatrix::from_triplets(2, 2, vec![(0, 0, 1.0), (0, 0, 2.0), (1, 0, -1.0), (1, 1, 0.0)]);
        assert_eq!(m.get(0, 0), 3.0);
        assert_eq!(m.nnz(), 2);
        assert_eq!(m.mul_vec(&[1.0, 5.0]), vec![3.0, -1.0]);
        assert_eq!(m.mul_vec_transpose(&[1.0, 1.0]), vec![2.0, 0.0]);
        assert_eq!(m.bandwidths(), (1, 0));
    }

    #[test]
    fn coordinate_text_round_trip() {
        let m = CsrMatrix::from_triplets(3, 3, vec![(0, 1, 0.1), (2, 0, -7.25), (1, 1, 1e-300)]);
        let back = CsrMatrix::from_coordinate_text(&m.to_coordinate_text()).unwrap();
        assert_eq!(m, back);
    }
}
