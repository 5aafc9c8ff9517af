//! Winograd minimal-filtering convolution.
//!
//! A tile `x` (n×n) and a filter `w` (r×r) map to an output tile (m×m,
//! `m = n - r + 1`) through `y = Sᵀ((G w Gᵀ) ⊙ (F x Fᵀ)) S`. With several input
//! channels the element-wise products are summed before the single inverse
//! transform. Convolution here means valid cross-correlation (no filter flip).

pub mod cook_toom;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{sandwich, Matrix, Tensor};

pub use cook_toom::{Rational, RationalBasis};

/// Transform matrices for one `(r, n)` pair, converted from exact rationals.
#[derive(Clone, Debug)]
pub struct WinogradBasis<T> {
    r: usize,
    n: usize,
    f: Matrix<T>,
    g: Matrix<T>,
    s: Matrix<T>,
    st: Matrix<T>,
    exact: RationalBasis,
}

impl<T: Scalar> WinogradBasis<T> {
    /// Basis with the conventional interpolation points: `(3,4)`, `(3,6)` and
    /// `(5,8)` are supported.
    pub fn new(r: usize, n: usize) -> Result<Self> {
        let points = cook_toom::default_points(r, n).ok_or_else(|| {
            Error::Unsupported(format!(
                "no default interpolation points for (r={r}, n={n}); supply them explicitly"
            ))
        })?;
        Self::with_points(r, n, &points)
    }

    pub fn with_points(r: usize, n: usize, points: &[Rational]) -> Result<Self> {
        let exact = cook_toom::construct(r, n, points)?;
        let conv = |m: &cook_toom::RationalMatrix| {
            Matrix::from_vec(m.rows, m.cols, m.to_f64().into_iter().map(T::lit).collect())
        };
        let f = conv(&exact.f)?;
        let g = conv(&exact.g)?;
        let s = conv(&exact.s)?;
        let st = s.transpose();
        Ok(Self {
            r,
            n,
            f,
            g,
            s,
            st,
            exact,
        })
    }

    pub fn r(&self) -> usize {
        self.r
    }

    pub fn n(&self) -> usize {
        self.n
    }

    /// Output tile side.
    pub fn m(&self) -> usize {
        self.n - self.r + 1
    }

    pub fn f(&self) -> &Matrix<T> {
        &self.f
    }

    pub fn g(&self) -> &Matrix<T> {
        &self.g
    }

    pub fn s(&self) -> &Matrix<T> {
        &self.s
    }

    pub fn exact(&self) -> &RationalBasis {
        &self.exact
    }

    pub fn interpolation_points(&self) -> &[Rational] {
        &self.exact.points
    }

    /// `W = G w Gᵀ`.
    pub fn transform_filter(&self, w: &Matrix<T>) -> Result<Matrix<T>> {
        if (w.rows(), w.cols()) != (self.r, self.r) {
            return Err(Error::dim("transform_filter", (self.r, self.r), (w.rows(), w.cols())));
        }
        sandwich(&self.g, w, &self.g)
    }

    /// `X = F x Fᵀ`.
    pub fn transform_input(&self, x: &Matrix<T>) -> Result<Matrix<T>> {
        if (x.rows(), x.cols()) != (self.n, self.n) {
            return Err(Error::dim("transform_input", (self.n, self.n), (x.rows(), x.cols())));
        }
        sandwich(&self.f, x, &self.f)
    }

    /// `y = Sᵀ M S`.
    pub fn inverse_transform(&self, m: &Matrix<T>) -> Result<Matrix<T>> {
        if (m.rows(), m.cols()) != (self.n, self.n) {
            return Err(Error::dim("inverse_transform", (self.n, self.n), (m.rows(), m.cols())));
        }
        self.st.matmul(m)?.matmul(&self.s)
    }

    /// Gradient of `‖(G w Gᵀ) ⊙ mask‖²`-style terms maps back through `Gᵀ M G`.
    pub fn adjoint_filter(&self, m: &Matrix<T>) -> Result<Matrix<T>> {
        self.g.transpose().matmul(m)?.matmul(&self.g)
    }
}

/// Tiling of an `H×W` input for stride-`m` Winograd tiles.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TileGrid {
    pub height: usize,
    pub width: usize,
    pub out_height: usize,
    pub out_width: usize,
    pub stride: usize,
    pub tiles_y: usize,
    pub tiles_x: usize,
    pub pad_bottom: usize,
    pub pad_right: usize,
}

impl TileGrid {
    pub fn new(height: usize, width: usize, r: usize, n: usize) -> Result<Self> {
        if height < r || width < r {
            return Err(Error::dim("TileGrid", format!(">= {r}"), (height, width)));
        }
        let m = n - r + 1;
        let out_height = height - r + 1;
        let out_width = width - r + 1;
        let tiles_y = out_height.div_ceil(m);
        let tiles_x = out_width.div_ceil(m);
        Ok(Self {
            height,
            width,
            out_height,
            out_width,
            stride: m,
            tiles_y,
            tiles_x,
            pad_bottom: tiles_y * m + r - 1 - height,
            pad_right: tiles_x * m + r - 1 - width,
        })
    }

    pub fn tile_count(&self) -> usize {
        self.tiles_y * self.tiles_x
    }
}

fn conv_shapes<T: Scalar>(input: &Tensor<T>, filters: &Tensor<T>) -> Result<(usize, usize, usize, usize, usize)> {
    let [c, h, w] = *input.shape() else {
        return Err(Error::dim("conv2d input", "C×H×W", input.shape()));
    };
    let [d, fc, r, r2] = *filters.shape() else {
        return Err(Error::dim("conv2d filters", "D×C×r×r", filters.shape()));
    };
    if fc != c || r != r2 {
        return Err(Error::dim("conv2d filters", (c, "r×r"), filters.shape()));
    }
    if h < r || w < r {
        return Err(Error::dim("conv2d input extent", format!(">= {r}"), (h, w)));
    }
    Ok((c, h, w, d, r))
}

/// Valid stride-1 cross-correlation:
/// `out[d,p,q] = Σ_c Σ_{u,v} filters[d,c,u,v] · input[c,p+u,q+v]`.
pub fn direct_conv2d<T: Scalar>(input: &Tensor<T>, filters: &Tensor<T>) -> Result<Tensor<T>> {
    let (c, h, w, d, r) = conv_shapes(input, filters)?;
    let (oh, ow) = (h - r + 1, w - r + 1);
    let mut out = Tensor::zeros(&[d, oh, ow]);
    let x = input.data();
    let f = filters.data();
    let o = out.data_mut();
    for di in 0..d {
        let obase = di * oh * ow;
        for ci in 0..c {
            let xbase = ci * h * w;
            let fbase = (di * c + ci) * r * r;
            for u in 0..r {
                for v in 0..r {
                    let k = f[fbase + u * r + v];
                    if k.is_zero() {
                        continue;
                    }
                    for p in 0..oh {
                        let xrow = &x[xbase + (p + u) * w + v..xbase + (p + u) * w + v + ow];
                        let orow = &mut o[obase + p * ow..obase + (p + 1) * ow];
                        for (acc, &xv) in orow.iter_mut().zip(xrow) {
                            *acc += k * xv;
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Transforms every `r×r` slice of a `D×C×r×r` filter bank: `D×C×n×n`.
pub fn transform_filters<T: Scalar>(basis: &WinogradBasis<T>, filters: &Tensor<T>) -> Result<Tensor<T>> {
    let [d, c, r, r2] = *filters.shape() else {
        return Err(Error::dim("transform_filters", "D×C×r×r", filters.shape()));
    };
    if r != basis.r() || r2 != basis.r() {
        return Err(Error::dim("transform_filters", basis.r(), (r, r2)));
    }
    let n = basis.n();
    let mut out = Tensor::zeros(&[d, c, n, n]);
    for k in 0..d * c {
        let w = Matrix::from_slice(r, r, &filters.data()[k * r * r..(k + 1) * r * r])?;
        let wd = basis.transform_filter(&w)?;
        out.data_mut()[k * n * n..(k + 1) * n * n].copy_from_slice(wd.data());
    }
    Ok(out)
}

/// Copies the zero-padded `n×n` patch at `(y0, x0)` of channel `ci`.
pub(crate) fn extract_tile<T: Scalar>(input: &Tensor<T>, ci: usize, y0: usize, x0: usize, n: usize, out: &mut Matrix<T>) {
    let [_, h, w] = *input.shape() else { unreachable!() };
    let plane = &input.data()[ci * h * w..(ci + 1) * h * w];
    let buf = out.data_mut();
    for i in 0..n {
        for j in 0..n {
            let (y, x) = (y0 + i, x0 + j);
            buf[i * n + j] = if y < h && x < w { plane[y * w + x] } else { T::zero() };
        }
    }
}

/// Winograd convolution with filters already in the Winograd domain
/// (`D×C×n×n`). Zero entries are still multiplied; see the deploy module
/// for the skipping variant.
pub fn winograd_conv2d_transformed<T: Scalar>(
    basis: &WinogradBasis<T>,
    input: &Tensor<T>,
    wfilters: &Tensor<T>,
) -> Result<Tensor<T>> {
    let [c, h, w] = *input.shape() else {
        return Err(Error::dim("winograd_conv2d input", "C×H×W", input.shape()));
    };
    let n = basis.n();
    let m = basis.m();
    let [d, fc, n1, n2] = *wfilters.shape() else {
        return Err(Error::dim("winograd_conv2d filters", "D×C×n×n", wfilters.shape()));
    };
    if fc != c || n1 != n || n2 != n {
        return Err(Error::dim("winograd_conv2d filters", (c, n, n), (fc, n1, n2)));
    }
    let grid = TileGrid::new(h, w, basis.r(), n)?;
    let mut out = Tensor::zeros(&[d, grid.out_height, grid.out_width]);
    let mut patch = Matrix::zeros(n, n);
    let mut xd: Vec<Matrix<T>> = Vec::with_capacity(c);
    let nn = n * n;
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
                    let wk = &wfilters.data()[(di * c + ci) * nn..(di * c + ci + 1) * nn];
                    for ((a, &wv), &xv) in acc.data_mut().iter_mut().zip(wk).zip(xc.data()) {
                        *a += wv * xv;
                    }
                }
                let y = basis.inverse_transform(&acc)?;
                write_tile(&mut out, di, y0, x0, m, &y);
            }
        }
    }
    Ok(out)
}

pub(crate) fn write_tile<T: Scalar>(out: &mut Tensor<T>, di: usize, y0: usize, x0: usize, m: usize, y: &Matrix<T>) {
    let [_, oh, ow] = *out.shape() else { unreachable!() };
    let plane = out.outer_mut(di);
    for i in 0..m {
        for j in 0..m {
            let (p, q) = (y0 + i, x0 + j);
            if p < oh && q < ow {
                plane[p * ow + q] = y.get(i, j);
            }
        }
    }
}

/// Multi-channel Winograd convolution of `input` (C×H×W) with spatial
/// `filters` (D×C×r×r); matches [`direct_conv2d`] up to round-off.
pub fn winograd_conv2d<T: Scalar>(
    basis: &WinogradBasis<T>,
    input: &Tensor<T>,
    filters: &Tensor<T>,
    stride: usize,
) -> Result<Tensor<T>> {
    if stride != 1 {
        return Err(Error::Unsupported(format!(
            "Winograd convolution is stride-1 only (requested stride {stride})"
        )));
    }
    conv_shapes(input, filters)?;
    let wf = transform_filters(basis, filters)?;
    winograd_conv2d_transformed(basis, input, &wf)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut impl Rng, shape: &[usize]) -> Tensor<f64> {
        let len = shape.iter().product();
        Tensor::from_vec(shape, (0..len).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    fn naive_conv(input: &Tensor<f64>, filters: &Tensor<f64>) -> Tensor<f64> {
        let (c, h, w) = (input.shape()[0], input.shape()[1], input.shape()[2]);
        let (d, r) = (filters.shape()[0], filters.shape()[2]);
        let mut out = Tensor::zeros(&[d, h - r + 1, w - r + 1]);
        for di in 0..d {
            for p in 0..h - r + 1 {
                for q in 0..w - r + 1 {
                    let mut s = 0.0;
                    for ci in 0..c {
                        for u in 0..r {
                            for v in 0..r {
                                s += filters.at(&[di, ci, u, v]) * input.at(&[ci, p + u, q + v]);
                            }
                        }
                    }
                    *out.at_mut(&[di, p, q]) = s;
                }
            }
        }
        out
    }

    fn delta(r: usize) -> Matrix<f64> {
        let mut w = Matrix::zeros(r, r);
        w.set(r / 2, r / 2, 1.0);
        w
    }

    #[test]
    fn f23_matrices() {
        let b = WinogradBasis::<f64>::new(3, 4).unwrap();
        let g = Matrix::from_rows(&[
            vec![1.0, 0.0, 0.0],
            vec![0.5, 0.5, 0.5],
            vec![0.5, -0.5, 0.5],
            vec![0.0, 0.0, 1.0],
        ])
        .unwrap();
        assert_eq!(b.g(), &g);
        assert_eq!(b.m(), 2);
    }

    #[test]
    fn delta_filter_golden_matrix() {
        let b = WinogradBasis::<f64>::new(3, 4).unwrap();
        let got = b.transform_filter(&delta(3)).unwrap();
        let q = 0.25;
        let expected = Matrix::from_rows(&[
            vec![0.0, 0.0, 0.0, 0.0],
            vec![0.0, q, -q, 0.0],
            vec![0.0, -q, q, 0.0],
            vec![0.0, 0.0, 0.0, 0.0],
        ])
        .unwrap();
        assert_eq!(got, expected);
    }

    #[test]
    fn zero_filter_maps_to_zero() {
        for &(r, n) in &[(3, 4), (3, 6), (5, 8)] {
            let b = WinogradBasis::<f64>::new(r, n).unwrap();
            let z = b.transform_filter(&Matrix::zeros(r, r)).unwrap();
            assert!(z.data().iter().all(|v| *v == 0.0));
            let z = b.transform_input(&Matrix::zeros(n, n)).unwrap();
            assert!(z.data().iter().all(|v| *v == 0.0));
        }
    }

    #[test]
    fn transforms_match_matmul_composition() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let b = WinogradBasis::<f64>::new(3, 6).unwrap();
        let w = Matrix::try_from(random(&mut rng, &[3, 3])).unwrap();
        let oracle = b.g().matmul(&w).unwrap().matmul(&b.g().transpose()).unwrap();
        assert!(b.transform_filter(&w).unwrap().max_abs_diff(&oracle) < 1e-14);

        let b4 = WinogradBasis::<f64>::new(3, 4).unwrap();
        let x = Matrix::<f64>::identity(4);
        let oracle = b4.f().matmul(&x).unwrap().matmul(&b4.f().transpose()).unwrap();
        assert!(b4.transform_input(&x).unwrap().max_abs_diff(&oracle) < 1e-14);
    }

    #[test]
    fn transforms_are_linear() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let b = WinogradBasis::<f64>::new(5, 8).unwrap();
        let x = Matrix::try_from(random(&mut rng, &[8, 8])).unwrap();
        let alpha = -2.75;
        let scaled = Matrix::from_vec(8, 8, x.data().iter().map(|v| v * alpha).collect()).unwrap();
        let lhs = b.transform_input(&scaled).unwrap();
        let rhs = b.transform_input(&x).unwrap();
        for (a, b) in lhs.data().iter().zip(rhs.data()) {
            assert!((a - alpha * b).abs() < 1e-10);
        }
    }

    #[test]
    fn shape_errors() {
        let b = WinogradBasis::<f64>::new(3, 4).unwrap();
        assert!(b.transform_filter(&Matrix::zeros(4, 4)).is_err());
        assert!(b.transform_input(&Matrix::zeros(3, 3)).is_err());
        assert!(matches!(WinogradBasis::<f64>::new(3, 5), Err(Error::Unsupported(_))));
    }

    #[test]
    fn equivalence_on_random_instances() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for &(r, n) in &[(3, 4), (3, 6), (5, 8)] {
            let b = WinogradBasis::<f64>::new(r, n).unwrap();
            for _ in 0..10 {
                let h = rng.gen_range(r..r + 12);
                let w = rng.gen_range(r..r + 12);
                let input = random(&mut rng, &[2, h, w]);
                let filters = random(&mut rng, &[3, 2, r, r]);
                let wino = winograd_conv2d(&b, &input, &filters, 1).unwrap();
                let direct = direct_conv2d(&input, &filters).unwrap();
                assert!(wino.max_abs_diff(&direct).unwrap() <= 1e-8);
            }
        }
    }

    #[test]
    fn direct_matches_naive_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let input = random(&mut rng, &[2, 9, 9]);
        let filters = random(&mut rng, &[3, 2, 3, 3]);
        let got = direct_conv2d(&input, &filters).unwrap();
        assert!(got.max_abs_diff(&naive_conv(&input, &filters)).unwrap() < 1e-12);
        let b = WinogradBasis::<f64>::new(3, 4).unwrap();
        let wino = winograd_conv2d(&b, &input, &filters, 1).unwrap();
        assert!(wino.max_abs_diff(&naive_conv(&input, &filters)).unwrap() <= 1e-8);
    }

    #[test]
    fn zero_and_delta_filters() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let input = random(&mut rng, &[1, 7, 6]);
        let b = WinogradBasis::<f64>::new(3, 4).unwrap();
        let zeros = Tensor::zeros(&[2, 1, 3, 3]);
        let out = winograd_conv2d(&b, &input, &zeros, 1).unwrap();
        assert!(out.data().iter().all(|v| *v == 0.0));
        assert!(direct_conv2d(&input, &zeros).unwrap().data().iter().all(|v| *v == 0.0));

        let d = delta(3).to_tensor().reshape(&[1, 1, 3, 3]).unwrap();
        for out in [winograd_conv2d(&b, &input, &d, 1).unwrap(), direct_conv2d(&input, &d).unwrap()] {
            for p in 0..5 {
                for q in 0..4 {
                    assert!((out.at(&[0, p, q]) - input.at(&[0, p + 1, q + 1])).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn stride_two_is_unsupported() {
        let b = WinogradBasis::<f64>::new(3, 4).unwrap();
        let r = winograd_conv2d(&b, &Tensor::zeros(&[1, 5, 5]), &Tensor::zeros(&[1, 1, 3, 3]), 2);
        assert!(matches!(r, Err(Error::Unsupported(_))));
    }

    #[test]
    fn tile_grid_covers_output_once() {
        for h in 3..20 {
            let g = TileGrid::new(h, h + 1, 3, 6).unwrap();
            assert!(g.tiles_y * g.stride >= g.out_height);
            assert!((g.tiles_y - 1) * g.stride < g.out_height);
            assert_eq!(g.tiles_y * g.stride + 2, h + g.pad_bottom);
        }
    }

    #[test]
    fn single_precision_path() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let b = WinogradBasis::<f32>::new(3, 4).unwrap();
        let input = random(&mut rng, &[2, 8, 8]).cast::<f32>();
        let filters = random(&mut rng, &[2, 2, 3, 3]).cast::<f32>();
        let diff = winograd_conv2d(&b, &input, &filters, 1)
            .unwrap()
            .max_abs_diff(&direct_conv2d(&input, &filters).unwrap())
            .unwrap();
        assert!(diff < 1e-5);
    }
}
