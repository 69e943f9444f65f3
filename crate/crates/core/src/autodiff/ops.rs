use std::ops::Range;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub(super) fn hadamard(a: &Tensor, b: &Tensor) -> Tensor {
    let mut out = a.clone();
    for (o, y) in out.data_mut().iter_mut().zip(b.data()) {
        *o *= y;
    }
    out
}

pub(super) fn narrow_backward(g: &Tensor, dims: &[usize], axis: usize, start: usize) -> Tensor {
    let mut out = Tensor::zeros(dims);
    let inner: usize = dims[axis + 1..].iter().product();
    let outer: usize = dims[..axis].iter().product();
    let width = dims[axis];
    let len = g.dims()[axis];
    let chunk = len * inner;
    for o in 0..outer {
        let dst = (o * width + start) * inner;
        out.data_mut()[dst..dst + chunk].copy_from_slice(&g.data()[o * chunk..(o + 1) * chunk]);
    }
    out
}

pub(super) fn linear_forward(x: &Tensor, w: &Tensor, b: Option<&Tensor>) -> Result<Tensor> {
    if x.rank() != 2 || w.rank() != 2 || x.dims()[1] != w.dims()[0] {
        return Err(Error::shape(
            "linear",
            format!("input [B, {}] for weights {:?}", w.dims().first().unwrap_or(&0), w.dims()),
            format!("{:?}", x.dims()),
        ));
    }
    let (rows, d, k) = (x.dims()[0], w.dims()[0], w.dims()[1]);
    if let Some(b) = b {
        if b.dims() != [k] {
            return Err(Error::shape("linear", format!("bias [{k}]"), format!("{:?}", b.dims())));
        }
    }
    let mut out = vec![0.0; rows * k];
    for r in 0..rows {
        let orow = &mut out[r * k..(r + 1) * k];
        if let Some(b) = b {
            orow.copy_from_slice(b.data());
        }
        for (i, &xv) in x.data()[r * d..(r + 1) * d].iter().enumerate() {
            for (o, wv) in orow.iter_mut().zip(&w.data()[i * k..(i + 1) * k]) {
                *o += xv * wv;
            }
        }
    }
    Tensor::new(&[rows, k], out)
}

/// Returns (grad input if wanted, grad weight, grad bias).
pub(super) fn linear_backward(
    x: &Tensor,
    w: &Tensor,
    g: &Tensor,
    want_input: bool,
) -> (Option<Tensor>, Tensor, Tensor) {
    let (rows, d, k) = (x.dims()[0], w.dims()[0], w.dims()[1]);
    let mut gw = vec![0.0; d * k];
    let mut gb = vec![0.0; k];
    let mut gi = want_input.then(|| vec![0.0; rows * d]);
    for r in 0..rows {
        let grow = &g.data()[r * k..(r + 1) * k];
        for (bv, gv) in gb.iter_mut().zip(grow) {
            *bv += gv;
        }
        for i in 0..d {
            let xv = x.data()[r * d + i];
            let wrow = &w.data()[i * k..(i + 1) * k];
            for (gwv, gv) in gw[i * k..(i + 1) * k].iter_mut().zip(grow) {
                *gwv += xv * gv;
            }
            if let Some(gi) = gi.as_mut() {
                gi[r * d + i] = wrow.iter().zip(grow).map(|(a, b)| a * b).sum();
            }
        }
    }
    (
        gi.map(|v| Tensor::new(x.dims(), v).unwrap()),
        Tensor::new(w.dims(), gw).unwrap(),
        Tensor::new(&[k], gb).unwrap(),
    )
}

fn check_segments(op: &'static str, rows: usize, segments: &[Range<usize>]) -> Result<()> {
    if segments.is_empty() {
        return Err(Error::EmptySequence(op));
    }
    for s in segments {
        if s.is_empty() {
            return Err(Error::EmptySequence(op));
        }
        if s.end > rows {
            return Err(Error::shape(op, format!("rows < {rows}"), format!("{s:?}")));
        }
    }
    Ok(())
}

pub(super) fn segment_mean_forward(x: &Tensor, segments: &[Range<usize>]) -> Result<Tensor> {
    check_segments("segment_mean", x.dims()[0], segments)?;
    let inner = x.inner_size(0);
    let mut out = vec![0.0; segments.len() * inner];
    for (s, seg) in segments.iter().enumerate() {
        let orow = &mut out[s * inner..(s + 1) * inner];
        for r in seg.clone() {
            for (o, v) in orow.iter_mut().zip(&x.data()[r * inner..(r + 1) * inner]) {
                *o += v;
            }
        }
        let n = seg.len() as f64;
        for o in orow.iter_mut() {
            *o /= n;
        }
    }
    let mut dims = x.dims().to_vec();
    dims[0] = segments.len();
    Tensor::new(&dims, out)
}

pub(super) fn segment_mean_backward(
    g: &Tensor,
    dims: &[usize],
    segments: &[Range<usize>],
) -> Tensor {
    let mut out = Tensor::zeros(dims);
    let inner: usize = dims[1..].iter().product();
    for (s, seg) in segments.iter().enumerate() {
        let n = seg.len() as f64;
        let grow = &g.data()[s * inner..(s + 1) * inner];
        for r in seg.clone() {
            for (o, gv) in out.data_mut()[r * inner..(r + 1) * inner].iter_mut().zip(grow) {
                *o += gv / n;
            }
        }
    }
    out
}

pub(super) fn group_mean_forward(x: &Tensor, groups: &[Range<usize>]) -> Result<Tensor> {
    if x.rank() != 4 {
        return Err(Error::shape(
            "group_mean",
            "input [R, C, H, W]",
            format!("{:?}", x.dims()),
        ));
    }
    let (r, c, h, w) = (x.dims()[0], x.dims()[1], x.dims()[2], x.dims()[3]);
    check_segments("group_mean", w, groups)?;
    let ng = groups.len();
    let mut out = vec![0.0; r * c * ng];
    for n in 0..r {
        for ch in 0..c {
            let plane = &x.data()[(n * c + ch) * h * w..][..h * w];
            for (gi, grp) in groups.iter().enumerate() {
                let mut s = 0.0;
                for y in 0..h {
                    s += plane[y * w + grp.start..y * w + grp.end].iter().sum::<f64>();
                }
                out[(n * c + ch) * ng + gi] = s / (h * grp.len()) as f64;
            }
        }
    }
    Tensor::new(&[r, c * ng], out)
}

pub(super) fn group_mean_backward(g: &Tensor, dims: &[usize], groups: &[Range<usize>]) -> Tensor {
    let (r, c, h, w) = (dims[0], dims[1], dims[2], dims[3]);
    let ng = groups.len();
    let mut out = Tensor::zeros(dims);
    for n in 0..r {
        for ch in 0..c {
            let plane = &mut out.data_mut()[(n * c + ch) * h * w..][..h * w];
            for (gi, grp) in groups.iter().enumerate() {
                let v = g.data()[(n * c + ch) * ng + gi] / (h * grp.len()) as f64;
                for y in 0..h {
                    plane[y * w + grp.start..y * w + grp.end].fill(v);
                }
            }
        }
    }
    out
}

/// Returns (mean loss, softmax probabilities).
pub(super) fn cross_entropy_forward(logits: &Tensor, labels: &[usize]) -> Result<(f64, Tensor)> {
    if logits.rank() != 2 || logits.dims()[0] != labels.len() {
        return Err(Error::shape(
            "cross_entropy",
            format!("logits [{}, K]", labels.len()),
            format!("{:?}", logits.dims()),
        ));
    }
    let (b, k) = (logits.dims()[0], logits.dims()[1]);
    let mut probs = vec![0.0; b * k];
    let mut loss = 0.0;
    for (r, &label) in labels.iter().enumerate() {
        if label >= k {
            return Err(Error::Index { label, classes: k });
        }
        let row = &logits.data()[r * k..(r + 1) * k];
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let denom: f64 = row.iter().map(|v| (v - max).exp()).sum();
        let log_denom = denom.ln();
        for (p, v) in probs[r * k..(r + 1) * k].iter_mut().zip(row) {
            *p = (v - max).exp() / denom;
        }
        loss -= row[label] - max - log_denom;
    }
    Ok((loss / b as f64, Tensor::new(logits.dims(), probs)?))
}

pub(super) fn cross_entropy_backward(probs: &Tensor, labels: &[usize], upstream: f64) -> Tensor {
    let k = probs.dims()[1];
    let scale = upstream / labels.len() as f64;
    let mut g = probs.clone();
    for (r, &label) in labels.iter().enumerate() {
        g.data_mut()[r * k + label] -= 1.0;
        for v in &mut g.data_mut()[r * k..(r + 1) * k] {
            *v *= scale;
        }
    }
    g
}

pub(super) fn shake_forward(branches: &[&Tensor], coeffs: &[f64]) -> Result<Tensor> {
    let first = branches
        .first()
        .ok_or_else(|| Error::Param("shake over zero branches".into()))?;
    for b in branches {
        if b.dims() != first.dims() {
            return Err(Error::shape(
                "shake",
                format!("{:?}", first.dims()),
                format!("{:?}", b.dims()),
            ));
        }
    }
    let n = branches.len();
    let rows = first.dims()[0];
    if coeffs.len() != rows * n {
        return Err(Error::shape(
            "shake",
            format!("{rows} x {n} coefficients"),
            coeffs.len(),
        ));
    }
    let inner = first.inner_size(0);
    let mut out = vec![0.0; first.numel()];
    for r in 0..rows {
        let orow = &mut out[r * inner..(r + 1) * inner];
        for (k, b) in branches.iter().enumerate() {
            let a = coeffs[r * n + k];
            for (o, v) in orow.iter_mut().zip(&b.data()[r * inner..(r + 1) * inner]) {
                *o += a * v;
            }
        }
    }
    Tensor::new(first.dims(), out)
}

/// `g` with row `r` scaled by `coeffs[r * n + k]`.
pub(super) fn scale_rows(g: &Tensor, coeffs: &[f64], n: usize, k: usize) -> Tensor {
    let inner = g.inner_size(0);
    let mut out = g.clone();
    for (r, chunk) in out.data_mut().chunks_mut(inner).enumerate() {
        let c = coeffs[r * n + k];
        for v in chunk {
            *v *= c;
        }
    }
    out
}
