//! Eager kernels. The graph records calls into these and pairs each with a
//! backward rule; they are also usable directly on plain tensors.

use serde::{Deserialize, Serialize};

use crate::error::{Result, TensorError};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReduceOp {
    Mean,
    Variance,
}

/// Denominator used by variance reductions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum Divisor {
    /// Population variance, divides by the element count.
    #[default]
    N,
    /// Sample variance, divides by count minus one.
    NMinusOne,
}

/// How the right operand of a binary op maps onto the left operand.
///
/// Element `i` of the left operand pairs with element
/// `(i / inner) % period` of the right operand.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Broadcast {
    pub inner: usize,
    pub period: usize,
    /// Both operands have the same shape.
    pub same_shape: bool,
}

impl Broadcast {
    #[inline]
    pub fn index(&self, i: usize) -> usize {
        (i / self.inner) % self.period
    }

    pub fn is_identity(&self) -> bool {
        self.same_shape
    }

    /// `f(a[i], b[index(i)])` for every element of the left operand.
    pub fn map_pair<T: Copy>(&self, a: &[T], b: &[T], f: impl Fn(T, T) -> T) -> Vec<T> {
        if self.same_shape {
            return a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect();
        }
        let mut out = Vec::with_capacity(a.len());
        for (j, block) in a.chunks(self.inner).enumerate() {
            let y = b[j % self.period];
            out.extend(block.iter().map(|&x| f(x, y)));
        }
        out
    }

    /// Adds `term(i, index(i))` into `out[index(i)]` for `i` in `0..numel`.
    pub fn fold_into<T: Scalar>(&self, out: &mut [T], numel: usize, term: impl Fn(usize, usize) -> T) {
        if self.same_shape {
            for (i, o) in out.iter_mut().enumerate().take(numel) {
                *o = *o + term(i, i);
            }
            return;
        }
        for j in 0..numel / self.inner {
            let k = j % self.period;
            let mut acc = T::zero();
            for i in j * self.inner..(j + 1) * self.inner {
                acc = acc + term(i, k);
            }
            out[k] = out[k] + acc;
        }
    }
}

/// Accepted layouts: equal shapes; a scalar right operand; `[B,C]` against
/// `[B,C,...]` (leading prefix); `[C]` against `[B,C,...]` (channel axis).
pub fn broadcast_plan(lhs: &[usize], rhs: &[usize]) -> Result<Broadcast> {
    let numel: usize = lhs.iter().product();
    let mismatch = || TensorError::ShapeMismatch {
        op: "broadcast",
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    };
    if lhs == rhs {
        return Ok(Broadcast {
            inner: 1,
            period: numel,
            same_shape: true,
        });
    }
    if rhs.is_empty() {
        return Ok(Broadcast {
            inner: numel,
            period: 1,
            same_shape: false,
        });
    }
    if rhs.len() == 1 {
        if lhs.len() >= 2 && lhs[1] == rhs[0] {
            return Ok(Broadcast {
                inner: lhs[2..].iter().product(),
                period: rhs[0],
                same_shape: false,
            });
        }
        return Err(mismatch());
    }
    if rhs.len() < lhs.len() && lhs[..rhs.len()] == *rhs {
        return Ok(Broadcast {
            inner: lhs[rhs.len()..].iter().product(),
            period: rhs.iter().product(),
            same_shape: false,
        });
    }
    Err(mismatch())
}

fn check_divisor<T: Scalar>(b: &Tensor<T>) -> Result<()> {
    let positions: Vec<usize> = b
        .data()
        .iter()
        .enumerate()
        .filter(|(_, v)| !(v.abs() >= T::DIV_FLOOR))
        .map(|(i, _)| i)
        .collect();
    if positions.is_empty() {
        Ok(())
    } else {
        Err(TensorError::DivisionDomain {
            floor: T::DIV_FLOOR.as_f64(),
            positions,
        })
    }
}

pub fn elementwise<T: Scalar>(op: BinaryOp, a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let plan = broadcast_plan(a.shape(), b.shape())?;
    if op == BinaryOp::Div {
        check_divisor(b)?;
    }
    let f = match op {
        BinaryOp::Add => |x: T, y: T| x + y,
        BinaryOp::Sub => |x: T, y: T| x - y,
        BinaryOp::Mul => |x: T, y: T| x * y,
        BinaryOp::Div => |x: T, y: T| x / y,
    };
    Tensor::new(a.shape(), plan.map_pair(a.data(), b.data(), f))
}

pub fn add<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    elementwise(BinaryOp::Add, a, b)
}

pub fn sub<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    elementwise(BinaryOp::Sub, a, b)
}

pub fn mul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    elementwise(BinaryOp::Mul, a, b)
}

pub fn div<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    elementwise(BinaryOp::Div, a, b)
}

/// Validated reduction geometry.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ReducePlan {
    pub in_shape: Vec<usize>,
    pub axes: Vec<usize>,
    pub out_shape: Vec<usize>,
    /// Number of input elements folded into each output element.
    pub count: usize,
}

impl ReducePlan {
    pub fn new(shape: &[usize], axes: &[usize]) -> Result<Self> {
        if axes.is_empty() {
            return Err(TensorError::EmptyReduction);
        }
        let mut sorted = axes.to_vec();
        sorted.sort_unstable();
        for w in sorted.windows(2) {
            if w[0] == w[1] {
                return Err(TensorError::InvalidAxis {
                    axis: w[0],
                    rank: shape.len(),
                });
            }
        }
        if let Some(&axis) = sorted.iter().find(|&&a| a >= shape.len()) {
            return Err(TensorError::InvalidAxis {
                axis,
                rank: shape.len(),
            });
        }
        let out_shape = shape
            .iter()
            .enumerate()
            .filter(|(d, _)| !sorted.contains(d))
            .map(|(_, &n)| n)
            .collect();
        let count = sorted.iter().map(|&a| shape[a]).product();
        Ok(Self {
            in_shape: shape.to_vec(),
            axes: sorted,
            out_shape,
            count,
        })
    }

    /// Calls `f(input_index, output_index)` for every input element in
    /// row-major order.
    pub fn for_each(&self, mut f: impl FnMut(usize, usize)) {
        let rank = self.in_shape.len();
        let numel: usize = self.in_shape.iter().product();
        let first = self.axes[0];
        let last = *self.axes.last().unwrap();
        if last + 1 - first == self.axes.len() {
            // contiguous reduced block: [outer, reduced, tail]
            let tail: usize = self.in_shape[last + 1..].iter().product();
            let outer = numel / (self.count * tail);
            let mut i = 0;
            for o in 0..outer {
                for _ in 0..self.count {
                    for t in 0..tail {
                        f(i, o * tail + t);
                        i += 1;
                    }
                }
            }
            return;
        }
        let out_strides = crate::tensor::strides_of(&self.out_shape);
        let mut stride_for_dim = vec![0usize; rank];
        let mut o = 0;
        for (d, s) in stride_for_dim.iter_mut().enumerate() {
            if !self.axes.contains(&d) {
                *s = out_strides[o];
                o += 1;
            }
        }
        let mut counter = vec![0usize; rank];
        let mut out_index = 0usize;
        for i in 0..numel {
            f(i, out_index);
            for d in (0..rank).rev() {
                counter[d] += 1;
                out_index += stride_for_dim[d];
                if counter[d] < self.in_shape[d] {
                    break;
                }
                out_index -= stride_for_dim[d] * counter[d];
                counter[d] = 0;
            }
        }
    }
}

pub fn reduce<T: Scalar>(
    op: ReduceOp,
    x: &Tensor<T>,
    axes: &[usize],
    divisor: Divisor,
) -> Result<Tensor<T>> {
    let plan = ReducePlan::new(x.shape(), axes)?;
    Ok(reduce_with_plan(op, x, &plan, divisor)?.0)
}

/// Returns the reduction and, for variance, the means it was centred on.
pub(crate) fn reduce_with_plan<T: Scalar>(
    op: ReduceOp,
    x: &Tensor<T>,
    plan: &ReducePlan,
    divisor: Divisor,
) -> Result<(Tensor<T>, Option<Tensor<T>>)> {
    let xd = x.data();
    let mut sums = Tensor::zeros(&plan.out_shape)?;
    {
        let s = sums.data_mut();
        plan.for_each(|i, o| s[o] = s[o] + xd[i]);
    }
    let n = T::from_f64(plan.count as f64);
    let mean = sums.map(|v| v / n);
    match op {
        ReduceOp::Mean => Ok((mean, None)),
        ReduceOp::Variance => {
            let denom = match divisor {
                Divisor::N => plan.count,
                Divisor::NMinusOne => plan.count.checked_sub(1).filter(|&d| d > 0).ok_or(
                    TensorError::NumericalDomain {
                        op: "variance",
                        reason: "sample variance of a single element".into(),
                    },
                )?,
            };
            let denom = T::from_f64(denom as f64);
            let mut acc = Tensor::zeros(&plan.out_shape)?;
            {
                let a = acc.data_mut();
                let m = mean.data();
                plan.for_each(|i, o| {
                    let d = xd[i] - m[o];
                    a[o] = a[o] + d * d;
                });
            }
            Ok((acc.map(|v| v / denom), Some(mean)))
        }
    }
}

pub fn sqrt<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    if let Some(pos) = x.data().iter().position(|v| !(*v >= T::zero())) {
        return Err(TensorError::NumericalDomain {
            op: "sqrt",
            reason: format!("negative or NaN input at flat position {pos}"),
        });
    }
    Ok(x.map(|v| v.sqrt()))
}

pub fn relu<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| if v > T::zero() { v } else { T::zero() })
}

/// Safe wrapper over the strided GEMM: `c (+)= op(a) * op(b)` where `a` is
/// stored `[m,k]` (or `[k,m]` when `a_t`) and `b` `[k,n]` (or `[n,k]` when
/// `b_t`), all row-major.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm<T: Scalar>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    a_t: bool,
    b: &[T],
    b_t: bool,
    c: &mut [T],
    accumulate: bool,
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { T::one() } else { T::zero() };
    // SAFETY: the asserts above bound every strided access.
    unsafe {
        T::gemm_raw(
            m,
            k,
            n,
            T::one(),
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Geometry of a 2-D convolution over `[B,Cin,H,W]` with `[Cout,Cin,k,k]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub batch: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_height: usize,
    pub out_width: usize,
}

impl ConvGeometry {
    pub fn new(x: &[usize], weight: &[usize], stride: usize, pad: usize) -> Result<Self> {
        let dim = |reason: String| TensorError::DimensionMismatch {
            op: "conv2d",
            reason,
        };
        if x.len() != 4 || weight.len() != 4 {
            return Err(dim(format!("expected rank-4 input and weight, got {x:?} and {weight:?}")));
        }
        if weight[1] != x[1] {
            return Err(dim(format!(
                "input has {} channels, weight expects {}",
                x[1], weight[1]
            )));
        }
        if weight[2] != weight[3] {
            return Err(dim(format!("non-square kernel {weight:?}")));
        }
        if stride == 0 {
            return Err(dim("stride must be positive".into()));
        }
        let kernel = weight[2];
        let (ph, pw) = (x[2] + 2 * pad, x[3] + 2 * pad);
        if kernel > ph || kernel > pw {
            return Err(dim(format!(
                "kernel {kernel} larger than padded input {ph}x{pw}"
            )));
        }
        Ok(Self {
            batch: x[0],
            in_channels: x[1],
            out_channels: weight[0],
            height: x[2],
            width: x[3],
            kernel,
            stride,
            pad,
            out_height: (ph - kernel) / stride + 1,
            out_width: (pw - kernel) / stride + 1,
        })
    }

    pub fn out_shape(&self) -> [usize; 4] {
        [self.batch, self.out_channels, self.out_height, self.out_width]
    }

    fn patch_len(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }

    fn positions(&self) -> usize {
        self.out_height * self.out_width
    }

    /// Output columns `ox` whose input column `ox * stride + kx - pad` lies
    /// inside the image.
    fn valid_cols(&self, kx: usize) -> (usize, usize) {
        let (s, p, w) = (self.stride, self.pad, self.width);
        let lo = if kx >= p { 0 } else { (p - kx).div_ceil(s) };
        let hi = if w + p > kx { ((w + p - kx - 1) / s + 1).min(self.out_width) } else { 0 };
        (lo.min(hi), hi)
    }

    /// Unfolds the whole batch into a `[Cin*k*k, B*Ho*Wo]` matrix whose
    /// column block `b*Ho*Wo..` belongs to instance `b`.
    fn im2col<T: Scalar>(&self, x: &[T]) -> Vec<T> {
        let (k, s) = (self.kernel, self.stride);
        let h = self.height as isize;
        let hw = self.height * self.width;
        let in_len = self.in_channels * hw;
        let ow = self.out_width;
        let ranges: Vec<(usize, usize)> = (0..k).map(|kx| self.valid_cols(kx)).collect();
        let mut cols = Vec::with_capacity(self.patch_len() * self.batch * self.positions());
        for c in 0..self.in_channels {
            for ky in 0..k {
                for (kx, &(lo, hi)) in ranges.iter().enumerate() {
                    for b in 0..self.batch {
                        let plane = &x[b * in_len + c * hw..b * in_len + (c + 1) * hw];
                        for oy in 0..self.out_height {
                            let iy = (oy * s + ky) as isize - self.pad as isize;
                            if iy < 0 || iy >= h {
                                cols.resize(cols.len() + ow, T::zero());
                                continue;
                            }
                            let src = &plane[iy as usize * self.width..(iy as usize + 1) * self.width];
                            cols.resize(cols.len() + lo, T::zero());
                            let start = lo * s + kx - self.pad;
                            if s == 1 {
                                cols.extend_from_slice(&src[start..start + hi - lo]);
                            } else {
                                cols.extend((0..hi - lo).map(|j| src[start + j * s]));
                            }
                            cols.resize(cols.len() + ow - hi, T::zero());
                        }
                    }
                }
            }
        }
        cols
    }

    /// Adjoint of [`Self::im2col`] for one instance: scatters columns
    /// `offset..offset + Ho*Wo` of a `[Cin*k*k, ld]` matrix back, accumulating.
    fn col2im<T: Scalar>(&self, cols: &[T], x: &mut [T], ld: usize, offset: usize) {
        let (k, s, p) = (self.kernel, self.stride, self.pad as isize);
        let h = self.height as isize;
        let hw = self.height * self.width;
        let ow = self.out_width;
        let ranges: Vec<(usize, usize)> = (0..k).map(|kx| self.valid_cols(kx)).collect();
        for c in 0..self.in_channels {
            let plane = &mut x[c * hw..(c + 1) * hw];
            for ky in 0..k {
                for (kx, &(lo, hi)) in ranges.iter().enumerate() {
                    let row = ((c * k + ky) * k + kx) * ld + offset;
                    for oy in 0..self.out_height {
                        let iy = (oy * self.stride + ky) as isize - p;
                        if iy < 0 || iy >= h {
                            continue;
                        }
                        let src = &cols[row + oy * ow + lo..row + oy * ow + hi];
                        let dst = &mut plane[iy as usize * self.width..(iy as usize + 1) * self.width];
                        let start = lo * s + kx - self.pad;
                        for (j, &v) in src.iter().enumerate() {
                            let d = &mut dst[start + j * s];
                            *d = *d + v;
                        }
                    }
                }
            }
        }
    }
}

/// Direct 2-D convolution (unfold + matrix product, no FFT).
pub fn conv2d<T: Scalar>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: usize,
    pad: usize,
) -> Result<Tensor<T>> {
    Ok(conv2d_unfolded(x, weight, bias, stride, pad)?.0)
}

/// [`conv2d`] that also returns the unfolded input, `[Cin*k*k, B*Ho*Wo]`.
pub(crate) fn conv2d_unfolded<T: Scalar>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: usize,
    pad: usize,
) -> Result<(Tensor<T>, Vec<T>)> {
    let geo = ConvGeometry::new(x.shape(), weight.shape(), stride, pad)?;
    if let Some(b) = bias {
        if b.shape() != [geo.out_channels] {
            return Err(TensorError::DimensionMismatch {
                op: "conv2d",
                reason: format!("bias shape {:?}, expected [{}]", b.shape(), geo.out_channels),
            });
        }
    }
    let (kk, np, nb) = (geo.patch_len(), geo.positions(), geo.batch);
    let ld = nb * np;
    let cols = geo.im2col(x.data());
    // [Cout, B*P]
    let mut prod = vec![T::zero(); geo.out_channels * ld];
    gemm(geo.out_channels, kk, ld, weight.data(), false, &cols, false, &mut prod, false);
    let mut out = vec![T::zero(); nb * geo.out_channels * np];
    for (co, row) in prod.chunks(ld).enumerate() {
        let bias = bias.map_or(T::zero(), |b| b.data()[co]);
        for (b, src) in row.chunks(np).enumerate() {
            let dst = &mut out[(b * geo.out_channels + co) * np..(b * geo.out_channels + co + 1) * np];
            for (d, &v) in dst.iter_mut().zip(src) {
                *d = v + bias;
            }
        }
    }
    Ok((Tensor::new(&geo.out_shape(), out)?, cols))
}

/// Gradients of [`conv2d`] with respect to input, weight and bias, given
/// the unfolded input from [`conv2d_unfolded`]. The input gradient is
/// skipped when `need_input` is false.
pub(crate) fn conv2d_backward<T: Scalar>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    grad_out: &Tensor<T>,
    stride: usize,
    pad: usize,
    need_input: bool,
    cols: &[T],
) -> Result<(Option<Tensor<T>>, Tensor<T>, Tensor<T>)> {
    let geo = ConvGeometry::new(x.shape(), weight.shape(), stride, pad)?;
    let (kk, np, nb, co_n) = (geo.patch_len(), geo.positions(), geo.batch, geo.out_channels);
    let in_len = geo.in_channels * geo.height * geo.width;
    let ld = nb * np;
    // dY regrouped as [Cout, B*P]
    let mut gy = vec![T::zero(); co_n * ld];
    let mut gb = vec![T::zero(); co_n];
    for (i, chunk) in grad_out.data().chunks(np).enumerate() {
        let (b, co) = (i / co_n, i % co_n);
        gy[co * ld + b * np..co * ld + (b + 1) * np].copy_from_slice(chunk);
        gb[co] = gb[co] + chunk.iter().copied().sum::<T>();
    }
    if cols.len() != kk * ld {
        return Err(TensorError::DimensionMismatch {
            op: "conv2d_backward",
            reason: format!("unfolded input has {} values, expected {}", cols.len(), kk * ld),
        });
    }
    // dW[Cout,KK] = dY[Cout,B*P] * cols^T[B*P,KK]
    let mut gw = weight.zeros_like();
    gemm(co_n, ld, kk, &gy, false, cols, true, gw.data_mut(), false);
    let gx = if need_input {
        // dcols[KK,B*P] = W^T[KK,Cout] * dY[Cout,B*P]
        let mut gcols = vec![T::zero(); kk * ld];
        gemm(kk, co_n, ld, weight.data(), true, &gy, false, &mut gcols, false);
        let mut gx = x.zeros_like();
        for b in 0..nb {
            geo.col2im(&gcols, &mut gx.data_mut()[b * in_len..(b + 1) * in_len], ld, b * np);
        }
        Some(gx)
    } else {
        None
    };
    Ok((gx, gw, Tensor::new(&[co_n], gb)?))
}

/// `y[B,Out] = x[B,In] * W[Out,In]^T + b[Out]`.
pub fn linear<T: Scalar>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
) -> Result<Tensor<T>> {
    let (bsz, fin, fout) = linear_dims(x, weight, bias)?;
    let mut out = vec![T::zero(); bsz * fout];
    if let Some(bias) = bias {
        for row in out.chunks_mut(fout) {
            row.copy_from_slice(bias.data());
        }
    }
    gemm(bsz, fin, fout, x.data(), false, weight.data(), true, &mut out, bias.is_some());
    Tensor::new(&[bsz, fout], out)
}

pub(crate) fn linear_dims<T: Scalar>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
) -> Result<(usize, usize, usize)> {
    let dim = |reason: String| TensorError::DimensionMismatch {
        op: "linear",
        reason,
    };
    if x.rank() != 2 || weight.rank() != 2 {
        return Err(dim(format!(
            "expected rank-2 input and weight, got {:?} and {:?}",
            x.shape(),
            weight.shape()
        )));
    }
    let (bsz, fin, fout) = (x.shape()[0], x.shape()[1], weight.shape()[0]);
    if weight.shape()[1] != fin {
        return Err(dim(format!(
            "input features {fin}, weight expects {}",
            weight.shape()[1]
        )));
    }
    if let Some(b) = bias {
        if b.shape() != [fout] {
            return Err(dim(format!("bias shape {:?}, expected [{fout}]", b.shape())));
        }
    }
    Ok((bsz, fin, fout))
}

/// 2x2 average pooling with stride 2 (odd trailing rows/columns dropped).
pub fn avg_pool2<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let s = x.shape();
    if s.len() != 4 || s[2] < 2 || s[3] < 2 {
        return Err(TensorError::DimensionMismatch {
            op: "avg_pool2",
            reason: format!("need [B,C,H>=2,W>=2], got {s:?}"),
        });
    }
    let (planes, h, w) = (s[0] * s[1], s[2], s[3]);
    let (oh, ow) = (h / 2, w / 2);
    let quarter = T::from_f64(0.25);
    let xd = x.data();
    let mut out = Vec::with_capacity(planes * oh * ow);
    for p in 0..planes {
        let base = p * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let i = base + 2 * oy * w + 2 * ox;
                out.push((xd[i] + xd[i + 1] + xd[i + w] + xd[i + w + 1]) * quarter);
            }
        }
    }
    Tensor::new(&[s[0], s[1], oh, ow], out)
}

/// Row gather along axis 0.
pub fn index_select0<T: Scalar>(x: &Tensor<T>, index: &[usize]) -> Result<Tensor<T>> {
    if x.rank() == 0 {
        return Err(TensorError::DimensionMismatch {
            op: "index_select0",
            reason: "scalar input".into(),
        });
    }
    let rows = x.shape()[0];
    if let Some(&bad) = index.iter().find(|&&i| i >= rows) {
        return Err(TensorError::DimensionMismatch {
            op: "index_select0",
            reason: format!("index {bad} out of range for {rows} rows"),
        });
    }
    let row = x.numel() / rows;
    let mut out = Vec::with_capacity(index.len() * row);
    for &i in index {
        out.extend_from_slice(&x.data()[i * row..(i + 1) * row]);
    }
    let mut shape = x.shape().to_vec();
    shape[0] = index.len();
    Tensor::new(&shape, out)
}

/// Row-wise softmax of `[B,K]` logits, max-shifted.
pub fn softmax_rows<T: Scalar>(logits: &Tensor<T>) -> Result<Tensor<T>> {
    if logits.rank() != 2 {
        return Err(TensorError::DimensionMismatch {
            op: "softmax",
            reason: format!("expected [B,K], got {:?}", logits.shape()),
        });
    }
    let k = logits.shape()[1];
    let mut out = logits.data().to_vec();
    for row in out.chunks_mut(k) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut total = T::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            total = total + *v;
        }
        for v in row.iter_mut() {
            *v = *v / total;
        }
    }
    Tensor::new(logits.shape(), out)
}

/// Mean negative log-likelihood of integer labels under row softmax.
pub fn cross_entropy<T: Scalar>(logits: &Tensor<T>, labels: &[usize]) -> Result<Tensor<T>> {
    check_labels(logits, labels)?;
    let k = logits.shape()[1];
    let mut total = 0.0f64;
    for (row, &y) in logits.data().chunks(k).zip(labels) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let lse = row.iter().map(|&v| (v - max).exp()).sum::<T>().ln() + max;
        total += (lse - row[y]).as_f64();
    }
    Ok(Tensor::scalar(T::from_f64(total / labels.len() as f64)))
}

pub(crate) fn check_labels<T: Scalar>(logits: &Tensor<T>, labels: &[usize]) -> Result<()> {
    if logits.rank() != 2 || logits.shape()[0] != labels.len() {
        return Err(TensorError::DimensionMismatch {
            op: "cross_entropy",
            reason: format!(
                "logits {:?} vs {} labels",
                logits.shape(),
                labels.len()
            ),
        });
    }
    let k = logits.shape()[1];
    if let Some(&bad) = labels.iter().find(|&&y| y >= k) {
        return Err(TensorError::DimensionMismatch {
            op: "cross_entropy",
            reason: format!("label {bad} out of range for {k} classes"),
        });
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, data).unwrap()
    }

    #[test]
    fn add_small_vectors() {
        let out = add(&t(&[2], &[1.0, 2.0]), &t(&[2], &[3.0, 4.0])).unwrap();
        assert_eq!(out.data(), &[4.0, 6.0]);
    }

    #[test]
    fn mul_by_ones_is_identity() {
        let x = t(&[2, 3], &[1.0, -2.0, 3.5, 0.0, 7.0, -1.25]);
        assert_eq!(mul(&x, &x.ones_like()).unwrap(), x);
    }

    #[test]
    fn div_reports_domain_positions() {
        let err = div(&t(&[2], &[1.0, 0.0]), &t(&[2], &[0.0, 1.0])).unwrap_err();
        match err {
            TensorError::DivisionDomain { positions, .. } => assert_eq!(positions, vec![0]),
            other => panic!("unexpected {other}"),
        }
        let err = div(&Tensor::<f32>::ones(&[3]).unwrap(), &Tensor::from_f64(&[3], &[1.0, 5e-8, -2.0]).unwrap())
            .unwrap_err();
        assert!(matches!(err, TensorError::DivisionDomain { ref positions, .. } if positions == &[1]));
    }

    #[test]
    fn shape_mismatch_names_both_shapes() {
        let err = add(&t(&[2, 3], &[0.0; 6]), &t(&[3, 2], &[0.0; 6])).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[3, 2]"), "{msg}");
    }

    #[test]
    fn channel_and_prefix_broadcast() {
        assert_eq!(
            broadcast_plan(&[2, 3, 4, 5], &[2, 3]).unwrap(),
            Broadcast { inner: 20, period: 6, same_shape: false }
        );
        assert_eq!(
            broadcast_plan(&[2, 3, 4, 5], &[3]).unwrap(),
            Broadcast { inner: 20, period: 3, same_shape: false }
        );
        // rank-1 operands always address the channel axis
        assert_eq!(
            broadcast_plan(&[3, 3], &[3]).unwrap(),
            Broadcast { inner: 1, period: 3, same_shape: false }
        );
        assert!(broadcast_plan(&[2, 3, 4, 5], &[4]).is_err());
        assert!(broadcast_plan(&[2, 3], &[2, 3, 4]).is_err());
    }

    #[test]
    fn mean_and_variance_of_two_by_two() {
        let x = t(&[1, 1, 2, 2], &[1.0, 3.0, 5.0, 7.0]);
        let m = reduce(ReduceOp::Mean, &x, &[2, 3], Divisor::N).unwrap();
        assert_eq!(m.shape(), &[1, 1]);
        assert_eq!(m.data(), &[4.0]);
        let v = reduce(ReduceOp::Variance, &x, &[2, 3], Divisor::N).unwrap();
        assert_eq!(v.data(), &[5.0]);
        let v1 = reduce(ReduceOp::Variance, &x, &[2, 3], Divisor::NMinusOne).unwrap();
        assert!((v1.data()[0] - 20.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn variance_of_constant_is_zero() {
        let x = Tensor::<f64>::full(&[2, 3, 4, 4], 2.5).unwrap();
        let v = reduce(ReduceOp::Variance, &x, &[0, 2, 3], Divisor::N).unwrap();
        assert!(v.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn reduce_rejects_bad_axes() {
        let x = t(&[2, 2], &[0.0; 4]);
        assert!(matches!(
            reduce(ReduceOp::Mean, &x, &[], Divisor::N),
            Err(TensorError::EmptyReduction)
        ));
        assert!(reduce(ReduceOp::Mean, &x, &[2], Divisor::N).is_err());
        assert!(reduce(ReduceOp::Mean, &x, &[1, 1], Divisor::N).is_err());
    }

    #[test]
    fn reduce_all_axes_gives_scalar() {
        let x = t(&[2, 2], &[1.0, 2.0, 3.0, 6.0]);
        let m = reduce(ReduceOp::Mean, &x, &[0, 1], Divisor::N).unwrap();
        assert_eq!(m.shape(), &[] as &[usize]);
        assert_eq!(m.item(), Some(3.0));
    }

    #[test]
    fn identity_kernel_convolution() {
        let x = Tensor::<f64>::from_f64(&[1, 2, 3, 3], &(0..18).map(|v| v as f64).collect::<Vec<_>>()).unwrap();
        let w = t(&[2, 2, 1, 1], &[1.0, 0.0, 0.0, 1.0]);
        assert_eq!(conv2d(&x, &w, None, 1, 0).unwrap(), x);
    }

    #[test]
    fn all_ones_three_by_three() {
        let x = Tensor::<f64>::ones(&[1, 1, 3, 3]).unwrap();
        let w = Tensor::<f64>::ones(&[1, 1, 3, 3]).unwrap();
        let y = conv2d(&x, &w, None, 1, 0).unwrap();
        assert_eq!(y.shape(), &[1, 1, 1, 1]);
        assert_eq!(y.data(), &[9.0]);
    }

    #[test]
    fn conv_output_size_formula() {
        let x = Tensor::<f32>::zeros(&[2, 3, 9, 7]).unwrap();
        let w = Tensor::<f32>::zeros(&[4, 3, 3, 3]).unwrap();
        let y = conv2d(&x, &w, None, 2, 1).unwrap();
        assert_eq!(y.shape(), &[2, 4, (9 + 2 - 3) / 2 + 1, (7 + 2 - 3) / 2 + 1]);
    }

    #[test]
    fn oversized_kernel_is_rejected() {
        let x = Tensor::<f32>::zeros(&[1, 1, 2, 2]).unwrap();
        let w = Tensor::<f32>::zeros(&[1, 1, 5, 5]).unwrap();
        assert!(matches!(
            conv2d(&x, &w, None, 1, 1),
            Err(TensorError::DimensionMismatch { .. })
        ));
        let w_bad = Tensor::<f32>::zeros(&[1, 2, 1, 1]).unwrap();
        assert!(conv2d(&x, &w_bad, None, 1, 0).is_err());
    }

    #[test]
    fn cross_entropy_of_uniform_logits() {
        let logits = Tensor::<f64>::zeros(&[3, 4]).unwrap();
        let loss = cross_entropy(&logits, &[0, 1, 3]).unwrap();
        assert!((loss.item().unwrap() - 4f64.ln()).abs() < 1e-12);
        assert!(cross_entropy(&logits, &[0, 1, 4]).is_err());
    }

    #[test]
    fn sqrt_rejects_negative() {
        assert!(sqrt(&t(&[2], &[4.0, -1.0])).is_err());
        assert_eq!(sqrt(&t(&[2], &[4.0, 0.0])).unwrap().data(), &[2.0, 0.0]);
    }
}
