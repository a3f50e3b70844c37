use crate::error::{Error, Result};
use crate::numerics::{Matrix, Real, SeededRng, TokenMatrix};
use crate::par;

/// 3×3 taps in row-major order; index 4 is the center.
pub type Kernel3x3<T> = [T; 9];

const CENTER: usize = 4;

/// Spatial layout of the token sequence: token `t` sits at row `t / w`,
/// column `t % w`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Grid {
    pub h: usize,
    pub w: usize,
}

impl Grid {
    pub fn new(h: usize, w: usize) -> Self {
        Grid { h, w }
    }

    pub fn area(&self) -> usize {
        self.h * self.w
    }

    /// Most square `h × w` with `h ≤ w` and `h · w == n`.
    pub fn near_square(n: usize) -> Self {
        let mut h = (n as f64).sqrt() as usize;
        while h > 1 && !n.is_multiple_of(h) {
            h -= 1;
        }
        let h = h.max(1);
        Grid { h, w: n / h }
    }

    pub(crate) fn check(&self, n: usize) -> Result<()> {
        if self.area() != n {
            return Err(Error::shape("grid", (self.h, self.w), (n, 1)));
        }
        Ok(())
    }
}

/// Depth-wise 3×3 convolution, one kernel per channel, with an optional
/// identity branch and an optional merged (reparameterized) kernel set.
#[derive(Clone, Debug, PartialEq)]
pub struct DwcParams<T> {
    pub kernels: Vec<Kernel3x3<T>>,
    pub identity_branch: bool,
    pub merged: Option<Vec<Kernel3x3<T>>>,
}

impl<T: Real> DwcParams<T> {
    pub fn new(kernels: Vec<Kernel3x3<T>>, identity_branch: bool) -> Self {
        DwcParams {
            kernels,
            identity_branch,
            merged: None,
        }
    }

    /// Kernels drawn with `±1/3` bounds (fan-in 9).
    pub fn random(channels: usize, identity_branch: bool, rng: &mut SeededRng) -> Self {
        let kernels = (0..channels)
            .map(|_| std::array::from_fn(|_| T::lit(rng.uniform(1.0 / 3.0))))
            .collect();
        Self::new(kernels, identity_branch)
    }

    /// Every channel gets the center delta, so the branch alone is identity.
    pub fn delta(channels: usize) -> Self {
        let mut k = [T::zero(); 9];
        k[CENTER] = T::one();
        Self::new(vec![k; channels], false)
    }

    pub fn channels(&self) -> usize {
        self.kernels.len()
    }

    pub fn cast<U: Real>(&self) -> DwcParams<U> {
        let cast = |ks: &Vec<Kernel3x3<T>>| ks.iter().map(|k| k.map(|v| U::lit(v.as_f64()))).collect();
        DwcParams {
            kernels: cast(&self.kernels),
            identity_branch: self.identity_branch,
            merged: self.merged.as_ref().map(cast),
        }
    }
}

/// Folds the identity branch into the center tap.
pub fn reparam_merge<T: Real>(dwc: &DwcParams<T>) -> DwcParams<T> {
    let merged = dwc
        .kernels
        .iter()
        .map(|k| {
            let mut m = *k;
            if dwc.identity_branch {
                m[CENTER] = m[CENTER] + T::one();
            }
            m
        })
        .collect();
    DwcParams {
        merged: Some(merged),
        ..dwc.clone()
    }
}

/// Depth-wise convolution of `v` laid out on `grid`, zero padding 1, stride 1.
///
/// Without `use_merged` the result is the branch convolution plus `v` when the
/// identity branch is on. With `use_merged` only the merged kernels run; they
/// must have been produced by [`reparam_merge`].
pub fn dwc_forward<T: Real>(
    v: &TokenMatrix<T>,
    grid: Grid,
    dwc: &DwcParams<T>,
    use_merged: bool,
) -> Result<TokenMatrix<T>> {
    grid.check(v.rows())?;
    if dwc.channels() != v.cols() {
        return Err(Error::shape("dwc_forward", v.shape(), (dwc.channels(), 9)));
    }
    let (kernels, identity) = if use_merged {
        let merged = dwc
            .merged
            .as_ref()
            .ok_or_else(|| Error::config("dwc.use_merged", "no merged kernels; run reparam_merge first"))?;
        (merged, false)
    } else {
        (&dwc.kernels, dwc.identity_branch)
    };
    let d = v.cols();
    let mut out = Matrix::zeros(v.rows(), d);
    par::for_each_row_mut(out.data_mut(), d, |t, o| {
        let (r, c) = ((t / grid.w) as isize, (t % grid.w) as isize);
        for ky in 0..3isize {
            let rr = r + ky - 1;
            if rr < 0 || rr >= grid.h as isize {
                continue;
            }
            for kx in 0..3isize {
                let cc = c + kx - 1;
                if cc < 0 || cc >= grid.w as isize {
                    continue;
                }
                let tap = (ky * 3 + kx) as usize;
                let src = v.row(rr as usize * grid.w + cc as usize);
                for ((o, &x), k) in o.iter_mut().zip(src).zip(kernels) {
                    *o = *o + k[tap] * x;
                }
            }
        }
        if identity {
            o.iter_mut().zip(v.row(t)).for_each(|(o, &x)| *o = *o + x);
        }
    });
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn delta_kernel_is_identity() {
        let v: Matrix<f64> = SeededRng::new(1).uniform_matrix(12, 3, 1.0);
        let out = dwc_forward(&v, Grid::new(3, 4), &DwcParams::delta(3), false).unwrap();
        assert_eq!(out, v);
    }

    #[test]
    fn identity_branch_alone() {
        let v: Matrix<f64> = SeededRng::new(2).uniform_matrix(12, 3, 1.0);
        let dwc = DwcParams::new(vec![[0.0; 9]; 3], true);
        assert_eq!(dwc_forward(&v, Grid::new(4, 3), &dwc, false).unwrap(), v);
    }

    #[test]
    fn merge_cases() {
        let zero_id = reparam_merge(&DwcParams::<f64>::new(vec![[0.0; 9]; 2], true));
        assert_eq!(zero_id.merged.unwrap(), DwcParams::<f64>::delta(2).kernels);
        let plain = DwcParams::<f64>::random(2, false, &mut SeededRng::new(3));
        assert_eq!(reparam_merge(&plain).merged.unwrap(), plain.kernels);
    }

    #[test]
    fn merged_matches_branch_sum() {
        let mut rng = SeededRng::new(4);
        let v: Matrix<f64> = rng.uniform_matrix(16, 8, 1.0);
        let dwc = reparam_merge(&DwcParams::random(8, true, &mut rng));
        let grid = Grid::new(4, 4);
        let a = dwc_forward(&v, grid, &dwc, false).unwrap();
        let b = dwc_forward(&v, grid, &dwc, true).unwrap();
        assert!(a.sub(&b).unwrap().max_abs() <= 1e-12);
    }

    #[test]
    fn hand_checked_corner() {
        // 2×2 grid, one channel, all-ones kernel: every output is the sum of
        // the whole grid because each pixel sees all four neighbors.
        let v = Matrix::from_vec(4, 1, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let dwc = DwcParams::new(vec![[1.0; 9]], false);
        let out = dwc_forward(&v, Grid::new(2, 2), &dwc, false).unwrap();
        assert_eq!(out.data(), &[10.0, 10.0, 10.0, 10.0]);
    }

    #[test]
    fn grid_and_merge_errors() {
        let v = Matrix::<f64>::zeros(5, 2);
        assert!(dwc_forward(&v, Grid::new(2, 2), &DwcParams::delta(2), false).is_err());
        let v = Matrix::<f64>::zeros(4, 2);
        assert!(dwc_forward(&v, Grid::new(2, 2), &DwcParams::delta(2), true).is_err());
    }

    #[test]
    fn near_square_grids() {
        assert_eq!(Grid::near_square(64), Grid::new(8, 8));
        assert_eq!(Grid::near_square(12), Grid::new(3, 4));
        assert_eq!(Grid::near_square(7), Grid::new(1, 7));
        assert_eq!(Grid::near_square(1), Grid::new(1, 1));
    }
}
