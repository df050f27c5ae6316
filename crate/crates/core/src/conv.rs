//! im2col / GEMM kernels for 3D convolution over `[C, T, H, W]` planes.

use serde::{Deserialize, Serialize};

use std::ops::Range;

use crate::error::{Error, Result};
use crate::tensor::Scalar;

/// How out-of-range taps are filled.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PadMode {
    Zeros,
    /// Clamp to the nearest edge sample. Constant inputs stay constant.
    Replicate,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvGeometry {
    pub in_channels: usize,
    pub out_channels: usize,
    /// (kt, kh, kw)
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    pub padding: [usize; 3],
    pub pad_mode: PadMode,
}

impl ConvGeometry {
    /// "Same"-style padding (k/2) for odd kernels.
    pub fn new(
        in_channels: usize,
        out_channels: usize,
        kernel: [usize; 3],
        stride: [usize; 3],
        pad_mode: PadMode,
    ) -> Self {
        Self {
            in_channels,
            out_channels,
            kernel,
            stride,
            padding: [kernel[0] / 2, kernel[1] / 2, kernel[2] / 2],
            pad_mode,
        }
    }

    pub fn pointwise(in_channels: usize, out_channels: usize) -> Self {
        Self::new(
            in_channels,
            out_channels,
            [1, 1, 1],
            [1, 1, 1],
            PadMode::Zeros,
        )
    }

    pub fn is_pointwise(&self) -> bool {
        self.kernel == [1, 1, 1] && self.stride == [1, 1, 1] && self.padding == [0, 0, 0]
    }

    pub fn taps(&self) -> usize {
        self.kernel.iter().product()
    }

    pub fn weight_shape(&self) -> [usize; 5] {
        [
            self.out_channels,
            self.in_channels,
            self.kernel[0],
            self.kernel[1],
            self.kernel[2],
        ]
    }

    pub fn output_dims(&self, input: [usize; 3]) -> Result<[usize; 3]> {
        let mut out = [0; 3];
        for a in 0..3 {
            let padded = input[a] + 2 * self.padding[a];
            if padded < self.kernel[a] || self.stride[a] == 0 {
                return Err(Error::Shape(format!(
                    "input extent {input:?} too small for kernel {:?}",
                    self.kernel
                )));
            }
            out[a] = (padded - self.kernel[a]) / self.stride[a] + 1;
        }
        Ok(out)
    }
}

/// Unfolding plan for one input extent. Samples are first copied into a
/// padded buffer whose rows are split by phase modulo the W stride, so
/// every column row is one contiguous copy.
pub struct TapTable {
    pub taps: usize,
    pub positions: usize,
    pub plane: usize,
    kernel: [usize; 3],
    out: [usize; 3],
    /// Padded extents; the W extent is the phase-split row width.
    padded: [usize; 3],
    /// Length of one phase within a padded row.
    phase_len: usize,
    stride_w: usize,
    /// Input offset of every padded element of one channel, or `ZERO_TAP`.
    gather: Vec<u32>,
    /// Padded offset of the first tap of every output row.
    row_base: Vec<usize>,
}

const ZERO_TAP: u32 = u32::MAX;

impl TapTable {
    pub fn build(geo: &ConvGeometry, input: [usize; 3]) -> Result<Self> {
        let out = geo.output_dims(input)?;
        let extent = [0, 1, 2].map(|a| input[a] + 2 * geo.padding[a]);
        let source = [0, 1, 2].map(|a| -> Vec<Option<usize>> {
            (0..extent[a])
                .map(|p| {
                    let q = p as isize - geo.padding[a] as isize;
                    if q >= 0 && (q as usize) < input[a] {
                        Some(q as usize)
                    } else {
                        match geo.pad_mode {
                            PadMode::Zeros => None,
                            PadMode::Replicate => Some(q.clamp(0, input[a] as isize - 1) as usize),
                        }
                    }
                })
                .collect()
        });
        let sw = geo.stride[2];
        let phase_len = extent[2].div_ceil(sw);
        let padded = [extent[0], extent[1], sw * phase_len];
        let mut gather = vec![ZERO_TAP; padded.iter().product()];
        for (t, st) in source[0].iter().enumerate() {
            for (h, sh) in source[1].iter().enumerate() {
                let row = (t * padded[1] + h) * padded[2];
                for (w, sw_) in source[2].iter().enumerate() {
                    if let (Some(a), Some(b), Some(c)) = (st, sh, sw_) {
                        gather[row + (w % sw) * phase_len + w / sw] =
                            ((a * input[1] + b) * input[2] + c) as u32;
                    }
                }
            }
        }
        let row_base = (0..out[0])
            .flat_map(|t| {
                (0..out[1])
                    .map(move |h| (t * geo.stride[0] * padded[1] + h * geo.stride[1]) * padded[2])
            })
            .collect();
        Ok(Self {
            taps: geo.taps(),
            positions: out.iter().product(),
            plane: input.iter().product(),
            kernel: geo.kernel,
            out,
            padded,
            phase_len,
            stride_w: sw,
            gather,
            row_base,
        })
    }

    /// Output rows (one per output `(t, h)` pair), each `row_len` positions long.
    pub fn rows(&self) -> usize {
        self.out[0] * self.out[1]
    }

    pub fn row_len(&self) -> usize {
        self.out[2]
    }

    /// Elements per channel of the padded buffer.
    pub fn padded_plane(&self) -> usize {
        self.gather.len()
    }

    /// Copy a `[C, plane]` sample into its `[C, padded_plane]` buffer.
    pub fn pad<T: Scalar>(&self, x: &[T], channels: usize, padded: &mut [T]) {
        let pp = self.padded_plane();
        for c in 0..channels {
            let src = &x[c * self.plane..(c + 1) * self.plane];
            for (d, &i) in padded[c * pp..(c + 1) * pp].iter_mut().zip(&self.gather) {
                *d = if i == ZERO_TAP {
                    T::ZERO
                } else {
                    src[i as usize]
                };
            }
        }
    }

    /// Adjoint of [`TapTable::pad`]: add padded gradients into `dx`.
    pub fn unpad_add<T: Scalar>(&self, dpadded: &[T], channels: usize, dx: &mut [T]) {
        let pp = self.padded_plane();
        for c in 0..channels {
            let dst = &mut dx[c * self.plane..(c + 1) * self.plane];
            for (&g, &i) in dpadded[c * pp..(c + 1) * pp].iter().zip(&self.gather) {
                if i != ZERO_TAP {
                    dst[i as usize] += g;
                }
            }
        }
    }

    /// Calls `f(col_row, padded_offset)` for every column row (channel and
    /// tap) and every output row in `rows`, in column order.
    #[inline]
    fn for_rows(&self, channels: usize, rows: Range<usize>, mut f: impl FnMut(usize, usize)) {
        let [tp, hp, wp] = self.padded;
        let [kt_n, kh_n, kw_n] = self.kernel;
        let bases = &self.row_base[rows];
        let mut k = 0;
        for c in 0..channels {
            for kt in 0..kt_n {
                for kh in 0..kh_n {
                    let tap_base = ((c * tp + kt) * hp + kh) * wp;
                    for kw in 0..kw_n {
                        let shift = (kw % self.stride_w) * self.phase_len + kw / self.stride_w;
                        for (i, &rb) in bases.iter().enumerate() {
                            f(k * bases.len() + i, tap_base + shift + rb);
                        }
                        k += 1;
                    }
                }
            }
        }
    }

    /// Columns `[C * taps, rows.len() * row_len]` for the output rows in
    /// `rows`, read from a padded sample.
    pub fn im2col_rows<T: Scalar>(
        &self,
        padded: &[T],
        channels: usize,
        rows: Range<usize>,
        col: &mut [T],
    ) {
        let ow = self.out[2];
        debug_assert_eq!(col.len(), channels * self.taps * rows.len() * ow);
        self.for_rows(channels, rows, |i, start| {
            col[i * ow..(i + 1) * ow].copy_from_slice(&padded[start..start + ow]);
        });
    }

    /// Adjoint of [`TapTable::im2col_rows`]: add columns into a padded gradient.
    pub fn col2im_rows<T: Scalar>(
        &self,
        col: &[T],
        channels: usize,
        rows: Range<usize>,
        dpadded: &mut [T],
    ) {
        let ow = self.out[2];
        self.for_rows(channels, rows, |i, start| {
            let g = &col[i * ow..(i + 1) * ow];
            for (v, s) in dpadded[start..start + ow].iter_mut().zip(g) {
                *v += *s;
            }
        });
    }

    /// Unfold one `[C, plane]` sample into `[C * taps, positions]`.
    pub fn im2col<T: Scalar>(&self, x: &[T], channels: usize, col: &mut [T]) {
        let mut padded = vec![T::ZERO; channels * self.padded_plane()];
        self.pad(x, channels, &mut padded);
        self.im2col_rows(&padded, channels, 0..self.rows(), col);
    }

    /// Adjoint of [`TapTable::im2col`]: scatter-add columns back into the plane.
    pub fn col2im<T: Scalar>(&self, col: &[T], channels: usize, dx: &mut [T]) {
        let mut dpadded = vec![T::ZERO; channels * self.padded_plane()];
        self.col2im_rows(col, channels, 0..self.rows(), &mut dpadded);
        self.unpad_add(&dpadded, channels, dx);
    }
}

/// `y[Cout, N] = W[Cout, K] · col[K, N] + b`, with `y` rows `ldy` apart.
pub fn conv_forward_block<T: Scalar>(
    weight: &[T],
    bias: &[T],
    col: &[T],
    [out_channels, k, n]: [usize; 3],
    y: &mut [T],
    ldy: usize,
) {
    for o in 0..out_channels {
        y[o * ldy..o * ldy + n].fill(bias[o]);
    }
    T::gemm(
        out_channels,
        k,
        n,
        T::ONE,
        weight,
        k as isize,
        1,
        col,
        n as isize,
        1,
        T::ONE,
        y,
        ldy as isize,
        1,
    );
}

/// Accumulate `dW += dY · colᵀ`, with `dy` rows `lddy` apart. Cheap as
/// long as the `[K, N]` column block stays in cache.
pub fn conv_weight_grad_block<T: Scalar>(
    dy: &[T],
    lddy: usize,
    col: &[T],
    [out_channels, k, n]: [usize; 3],
    dw: &mut [T],
) {
    T::gemm(
        out_channels,
        n,
        k,
        T::ONE,
        dy,
        lddy as isize,
        1,
        col,
        1,
        n as isize,
        T::ONE,
        dw,
        k as isize,
        1,
    );
}

/// `dcol[K, N] = Wᵀ · dY`, with `dy` rows `lddy` apart.
pub fn conv_input_grad_block<T: Scalar>(
    weight: &[T],
    dy: &[T],
    lddy: usize,
    [out_channels, k, n]: [usize; 3],
    dcol: &mut [T],
) {
    T::gemm(
        k,
        out_channels,
        n,
        T::ONE,
        weight,
        1,
        k as isize,
        dy,
        lddy as isize,
        1,
        T::ZERO,
        dcol,
        n as isize,
        1,
    );
}
