use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Weights `[out_ch, in_ch, H, W]` and bias `[out_ch]` of a convolution.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvParams {
    pub weights: Tensor,
    pub bias: Tensor,
}

impl ConvParams {
    pub fn new(weights: Tensor, bias: Tensor) -> Result<Self> {
        if weights.rank() != 4 {
            return Err(Error::shape(
                "conv2d",
                "weights [out_ch, in_ch, H, W]",
                format!("{:?}", weights.dims()),
            ));
        }
        if bias.dims() != [weights.dims()[0]] {
            return Err(Error::shape(
                "conv2d",
                format!("bias [{}]", weights.dims()[0]),
                format!("{:?}", bias.dims()),
            ));
        }
        Ok(ConvParams { weights, bias })
    }

    pub fn zeros(out_ch: usize, in_ch: usize, h: usize, w: usize) -> Self {
        ConvParams {
            weights: Tensor::zeros(&[out_ch, in_ch, h, w]),
            bias: Tensor::zeros(&[out_ch]),
        }
    }

    pub fn out_channels(&self) -> usize {
        self.weights.dims()[0]
    }

    pub fn in_channels(&self) -> usize {
        self.weights.dims()[1]
    }
}

/// Leading (low-index) padding for a same-mode kernel extent; the trailing
/// side gets `extent - 1 - leading`.
pub fn conv_output_padding(extent: usize) -> usize {
    (extent - 1) / 2
}

struct Geometry {
    batch: usize,
    cin: usize,
    cout: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    pad_top: usize,
    pad_left: usize,
}

impl Geometry {
    fn of(input: &Tensor, weight: &Tensor) -> Result<Self> {
        if input.rank() != 4 {
            return Err(Error::shape(
                "conv2d",
                "input [B, C, H, W]",
                format!("{:?}", input.dims()),
            ));
        }
        if weight.rank() != 4 {
            return Err(Error::shape(
                "conv2d",
                "weights [out_ch, in_ch, H, W]",
                format!("{:?}", weight.dims()),
            ));
        }
        let (id, wd) = (input.dims(), weight.dims());
        if id[1] != wd[1] {
            return Err(Error::shape(
                "conv2d",
                format!("{} input channels (weights {:?})", wd[1], wd),
                format!("{} input channels (input {:?})", id[1], id),
            ));
        }
        Ok(Geometry {
            batch: id[0],
            cin: id[1],
            cout: wd[0],
            h: id[2],
            w: id[3],
            kh: wd[2],
            kw: wd[3],
            pad_top: conv_output_padding(wd[2]),
            pad_left: conv_output_padding(wd[3]),
        })
    }

    fn plane(&self) -> usize {
        self.h * self.w
    }

    /// Input row for output row `y` and kernel row `ky`, if inside the image.
    fn source_row(&self, y: usize, ky: usize) -> Option<usize> {
        let iy = (y + ky).checked_sub(self.pad_top)?;
        (iy < self.h).then_some(iy)
    }

    /// For kernel column `kx`: the valid output column range and the input
    /// offset `ix = x + kx - pad_left` expressed as (range, shift sign, shift).
    fn column_span(&self, kx: usize) -> (usize, usize, isize) {
        let shift = kx as isize - self.pad_left as isize;
        let lo = (-shift).max(0) as usize;
        let hi = (self.w as isize - shift).min(self.w as isize).max(0) as usize;
        (lo, hi, shift)
    }
}

#[inline]
fn axpy(dst: &mut [f64], a: f64, src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += a * s;
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(super) fn forward(input: &Tensor, weight: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let g = Geometry::of(input, weight)?;
    if bias.dims() != [g.cout] {
        return Err(Error::shape(
            "conv2d",
            format!("bias [{}]", g.cout),
            format!("{:?}", bias.dims()),
        ));
    }
    let plane = g.plane();
    let mut out = vec![0.0; g.batch * g.cout * plane];
    let x = input.data();
    let wt = weight.data();
    for b in 0..g.batch {
        for co in 0..g.cout {
            let out_plane = &mut out[(b * g.cout + co) * plane..][..plane];
            out_plane.fill(bias.data()[co]);
            for ci in 0..g.cin {
                let in_plane = &x[(b * g.cin + ci) * plane..][..plane];
                for ky in 0..g.kh {
                    let krow = &wt[((co * g.cin + ci) * g.kh + ky) * g.kw..][..g.kw];
                    for y in 0..g.h {
                        let Some(iy) = g.source_row(y, ky) else {
                            continue;
                        };
                        let in_row = &in_plane[iy * g.w..][..g.w];
                        let out_row = &mut out_plane[y * g.w..][..g.w];
                        for (kx, &wv) in krow.iter().enumerate() {
                            let (lo, hi, shift) = g.column_span(kx);
                            if lo >= hi {
                                continue;
                            }
                            let src = (lo as isize + shift) as usize;
                            axpy(&mut out_row[lo..hi], wv, &in_row[src..src + (hi - lo)]);
                        }
                    }
                }
            }
        }
    }
    Tensor::new(&[g.batch, g.cout, g.h, g.w], out)
}

/// Returns (grad input, grad weight, grad bias), computing only what is asked.
pub(super) fn backward(
    input: &Tensor,
    weight: &Tensor,
    grad_out: &Tensor,
    want_input: bool,
    want_params: bool,
) -> (Option<Tensor>, Option<Tensor>, Option<Tensor>) {
    let g = Geometry::of(input, weight).expect("geometry validated in forward");
    let plane = g.plane();
    let x = input.data();
    let wt = weight.data();
    let go = grad_out.data();

    let mut gin = want_input.then(|| vec![0.0; x.len()]);
    let mut gw = want_params.then(|| vec![0.0; wt.len()]);
    let mut gb = want_params.then(|| vec![0.0; g.cout]);

    for b in 0..g.batch {
        for co in 0..g.cout {
            let go_plane = &go[(b * g.cout + co) * plane..][..plane];
            if let Some(gb) = gb.as_mut() {
                gb[co] += go_plane.iter().sum::<f64>();
            }
            for ci in 0..g.cin {
                let in_off = (b * g.cin + ci) * plane;
                for ky in 0..g.kh {
                    let kbase = ((co * g.cin + ci) * g.kh + ky) * g.kw;
                    for y in 0..g.h {
                        let Some(iy) = g.source_row(y, ky) else {
                            continue;
                        };
                        let go_row = &go_plane[y * g.w..][..g.w];
                        let row_off = in_off + iy * g.w;
                        for kx in 0..g.kw {
                            let (lo, hi, shift) = g.column_span(kx);
                            if lo >= hi {
                                continue;
                            }
                            let src = row_off + (lo as isize + shift) as usize;
                            let n = hi - lo;
                            if let Some(gw) = gw.as_mut() {
                                gw[kbase + kx] += dot(&go_row[lo..hi], &x[src..src + n]);
                            }
                            if let Some(gin) = gin.as_mut() {
                                axpy(&mut gin[src..src + n], wt[kbase + kx], &go_row[lo..hi]);
                            }
                        }
                    }
                }
            }
        }
    }

    (
        gin.map(|d| Tensor::new(input.dims(), d).unwrap()),
        gw.map(|d| Tensor::new(weight.dims(), d).unwrap()),
        gb.map(|d| Tensor::new(&[g.cout], d).unwrap()),
    )
}
