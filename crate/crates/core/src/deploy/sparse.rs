use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{Matrix, Tensor};
use crate::winograd::{extract_tile, write_tile, TileGrid, WinogradBasis};

/// Coordinate list of the nonzeros of one `size×size` filter slice.
#[derive(Clone, Debug, PartialEq)]
pub struct SparseFilter<T> {
    size: usize,
    entries: Vec<(u32, T)>,
}

impl<T: Scalar> SparseFilter<T> {
    pub fn from_dense(size: usize, dense: &[T]) -> Result<Self> {
        if dense.len() != size * size {
            return Err(Error::dim("SparseFilter", size * size, dense.len()));
        }
        let entries = dense
            .iter()
            .enumerate()
            .filter(|(_, v)| **v != T::zero())
            .map(|(i, &v)| (i as u32, v))
            .collect();
        Ok(Self { size, entries })
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn nnz(&self) -> usize {
        self.entries.len()
    }

    /// `(flat index, value)` pairs in increasing index order.
    pub fn entries(&self) -> &[(u32, T)] {
        &self.entries
    }

    pub fn to_dense(&self) -> Vec<T> {
        let mut d = vec![T::zero(); self.size * self.size];
        for &(i, v) in &self.entries {
            d[i as usize] = v;
        }
        d
    }
}

/// `D×C` bank of sparse filter slices (spatial `r×r` or Winograd `n×n`).
#[derive(Clone, Debug, PartialEq)]
pub struct SparseBank<T> {
    out_channels: usize,
    in_channels: usize,
    filters: Vec<SparseFilter<T>>,
}

impl<T: Scalar> SparseBank<T> {
    /// From a dense `D×C×k×k` tensor.
    pub fn from_tensor(t: &Tensor<T>) -> Result<Self> {
        let [d, c, k1, k2] = *t.shape() else {
            return Err(Error::dim("SparseBank", "D×C×k×k", t.shape()));
        };
        if k1 != k2 {
            return Err(Error::dim("SparseBank", "square slices", (k1, k2)));
        }
        let filters = t
            .data()
            .chunks(k1 * k1)
            .map(|s| SparseFilter::from_dense(k1, s))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { out_channels: d, in_channels: c, filters })
    }

    pub fn out_channels(&self) -> usize {
        self.out_channels
    }

    pub fn in_channels(&self) -> usize {
        self.in_channels
    }

    pub fn size(&self) -> usize {
        self.filters.first().map_or(0, SparseFilter::size)
    }

    pub fn filter(&self, d: usize, c: usize) -> &SparseFilter<T> {
        &self.filters[d * self.in_channels + c]
    }

    pub fn nnz(&self) -> usize {
        self.filters.iter().map(SparseFilter::nnz).sum()
    }

    pub fn len(&self) -> usize {
        self.filters.len() * self.size() * self.size()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn to_tensor(&self) -> Tensor<T> {
        let k = self.size();
        let data = self.filters.iter().flat_map(SparseFilter::to_dense).collect();
        Tensor::from_vec(&[self.out_channels, self.in_channels, k, k], data).expect("consistent bank")
    }
}

/// Valid stride-1 convolution skipping zero weights. Returns the output and
/// the number of multiply-accumulates performed.
pub fn sparse_spatial_conv<T: Scalar>(input: &Tensor<T>, bank: &SparseBank<T>) -> Result<(Tensor<T>, u64)> {
    let [c, h, w] = *input.shape() else {
        return Err(Error::dim("sparse_spatial_conv input", "C×H×W", input.shape()));
    };
    let r = bank.size();
    if c != bank.in_channels() || h < r || w < r {
        return Err(Error::dim("sparse_spatial_conv", (bank.in_channels(), r, r), (c, h, w)));
    }
    let (oh, ow) = (h - r + 1, w - r + 1);
    let d = bank.out_channels();
    let mut out = Tensor::zeros(&[d, oh, ow]);
    let mut macs = 0u64;
    for di in 0..d {
        let plane = out.outer_mut(di);
        for ci in 0..c {
            let src = &input.data()[ci * h * w..(ci + 1) * h * w];
            for &(idx, v) in bank.filter(di, ci).entries() {
                let (ky, kx) = (idx as usize / r, idx as usize % r);
                for y in 0..oh {
                    let row = &src[(y + ky) * w + kx..(y + ky) * w + kx + ow];
                    for (o, &x) in plane[y * ow..(y + 1) * ow].iter_mut().zip(row) {
                        *o += v * x;
                    }
                }
                macs += (oh * ow) as u64;
            }
        }
    }
    Ok((out, macs))
}

/// Winograd convolution with sparse Winograd-domain filters: the elementwise
/// stage only touches nonzero `W` entries. Returns the output and the
/// elementwise-stage multiply-accumulate count.
pub fn sparse_winograd_conv<T: Scalar>(
    basis: &WinogradBasis<T>,
    input: &Tensor<T>,
    bank: &SparseBank<T>,
) -> Result<(Tensor<T>, u64)> {
    let [c, h, w] = *input.shape() else {
        return Err(Error::dim("sparse_winograd_conv input", "C×H×W", input.shape()));
    };
    let (n, m) = (basis.n(), basis.m());
    if bank.size() != n || bank.in_channels() != c {
        return Err(Error::dim("sparse_winograd_conv", (c, n), (bank.in_channels(), bank.size())));
    }
    let grid = TileGrid::new(h, w, basis.r(), n)?;
    let d = bank.out_channels();
    let mut out = Tensor::zeros(&[d, grid.out_height, grid.out_width]);
    let mut patch = Matrix::zeros(n, n);
    let mut xd: Vec<Matrix<T>> = Vec::with_capacity(c);
    let mut macs = 0u64;
    for ty in 0..grid.tiles_y {
        for tx in 0..grid.tiles_x {
            let (y0, x0) = (ty * m, tx * m);
            xd.clear();
            for ci in 0..c {
                extract_tile(input, ci, y0, x0, n, &mut patch);
                xd.push(basis.transform_input(&patch)?);
            }
            for di in 0..d {
                let mut acc = Matrix::zeros(n, n);
                for (ci, xc) in xd.iter().enumerate() {
                    let f = bank.filter(di, ci);
                    let (a, x) = (acc.data_mut(), xc.data());
                    for &(idx, v) in f.entries() {
                        a[idx as usize] += v * x[idx as usize];
                    }
                    macs += f.nnz() as u64;
                }
                let y = basis.inverse_transform(&acc)?;
                write_tile(&mut out, di, y0, x0, m, &y);
            }
        }
    }
    Ok((out, macs))
}
