//! Shake-Shake aggregation with optional spectral sub-band shaking.
//!
//! During training the branch outputs are mixed with forward weights drawn
//! uniformly from the simplex, while the gradient reaching branch `n` is
//! scaled by an independently drawn backward weight. At eval time each branch
//! contributes its expectation `1/N`.
//!
//! Sub-band variants split the spectral axis at its midpoint and shake the
//! upper (high-frequency) half, the lower half, or both halves with
//! independent draws. An unshaken half is the plain sum over branches.

use std::fmt;
use std::ops::Range;
use std::str::FromStr;

use rand::Rng;
use rand_distr::Exp1;

use crate::autodiff::{Graph, Phase, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Spectral axis of `[rows, channels, context, frequency]` feature maps.
pub const SPECTRAL_AXIS: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ShakeMode {
    /// Plain additive merge of the branches.
    None,
    Full,
    Upper,
    Lower,
    Both,
}

impl ShakeMode {
    pub const ALL: [ShakeMode; 5] = [
        ShakeMode::None,
        ShakeMode::Full,
        ShakeMode::Upper,
        ShakeMode::Lower,
        ShakeMode::Both,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ShakeMode::None => "none",
            ShakeMode::Full => "full",
            ShakeMode::Upper => "upper",
            ShakeMode::Lower => "lower",
            ShakeMode::Both => "both",
        }
    }
}

impl fmt::Display for ShakeMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ShakeMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "none" | "baseline" => Ok(ShakeMode::None),
            "full" => Ok(ShakeMode::Full),
            "upper" => Ok(ShakeMode::Upper),
            "lower" => Ok(ShakeMode::Lower),
            "both" => Ok(ShakeMode::Both),
            other => Err(Error::Param(format!("unknown shake mode {other:?}"))),
        }
    }
}

/// Unit at which independent coefficient draws are made.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum Granularity {
    Batch,
    Sample,
    #[default]
    Frame,
}

impl Granularity {
    pub fn as_str(self) -> &'static str {
        match self {
            Granularity::Batch => "batch",
            Granularity::Sample => "sample",
            Granularity::Frame => "frame",
        }
    }
}

impl fmt::Display for Granularity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Granularity {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "batch" => Ok(Granularity::Batch),
            "sample" => Ok(Granularity::Sample),
            "frame" => Ok(Granularity::Frame),
            other => Err(Error::Param(format!("unknown granularity {other:?}"))),
        }
    }
}

/// How the leading (row) axis of a feature map is grouped into samples.
///
/// Each sample owns a contiguous run of rows, one per frame.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FrameLayout {
    samples: Vec<Range<usize>>,
}

impl FrameLayout {
    pub fn from_frame_counts(counts: &[usize]) -> Result<Self> {
        if counts.is_empty() || counts.contains(&0) {
            return Err(Error::Param(format!("frame counts must be positive: {counts:?}")));
        }
        let mut start = 0;
        let samples = counts
            .iter()
            .map(|&c| {
                let r = start..start + c;
                start += c;
                r
            })
            .collect();
        Ok(FrameLayout { samples })
    }

    /// `batch` samples of `frames` rows each.
    pub fn uniform(batch: usize, frames: usize) -> Result<Self> {
        Self::from_frame_counts(&vec![frames; batch])
    }

    pub fn samples(&self) -> &[Range<usize>] {
        &self.samples
    }

    pub fn batch(&self) -> usize {
        self.samples.len()
    }

    pub fn rows(&self) -> usize {
        self.samples.last().map_or(0, |r| r.end)
    }
}

/// Forward (`alphas`) and backward (`betas`) simplex draws, one row of
/// `branches` values per cell.
#[derive(Debug, Clone, PartialEq)]
pub struct ShakeCoefficients {
    pub alphas: Vec<f64>,
    pub betas: Vec<f64>,
    pub branches: usize,
    pub granularity: Granularity,
}

impl ShakeCoefficients {
    pub fn cells(&self) -> usize {
        self.alphas.len() / self.branches
    }

    pub fn alpha_row(&self, cell: usize) -> &[f64] {
        &self.alphas[cell * self.branches..(cell + 1) * self.branches]
    }

    pub fn beta_row(&self, cell: usize) -> &[f64] {
        &self.betas[cell * self.branches..(cell + 1) * self.branches]
    }

    /// Fixed coefficients: the same forward and backward rows for every cell.
    pub fn constant(
        granularity: Granularity,
        layout: &FrameLayout,
        alpha: &[f64],
        beta: &[f64],
    ) -> Result<Self> {
        if alpha.len() != beta.len() || alpha.is_empty() {
            return Err(Error::Param("alpha and beta rows must match in length".into()));
        }
        let cells = cell_count(granularity, layout);
        Ok(ShakeCoefficients {
            alphas: alpha.repeat(cells),
            betas: beta.repeat(cells),
            branches: alpha.len(),
            granularity,
        })
    }

    fn cell_of_rows(&self, layout: &FrameLayout) -> Result<Vec<usize>> {
        let cells = cell_count(self.granularity, layout);
        if cells != self.cells() {
            return Err(Error::shape(
                "shake coefficients",
                format!("{cells} {} cells", self.granularity),
                self.cells(),
            ));
        }
        let mut map = Vec::with_capacity(layout.rows());
        for (s, range) in layout.samples().iter().enumerate() {
            for row in range.clone() {
                map.push(match self.granularity {
                    Granularity::Batch => 0,
                    Granularity::Sample => s,
                    Granularity::Frame => row,
                });
            }
        }
        Ok(map)
    }

    /// Expands cell rows into one row per feature-map row.
    fn per_row(&self, layout: &FrameLayout) -> Result<(Vec<f64>, Vec<f64>)> {
        let map = self.cell_of_rows(layout)?;
        let mut fwd = Vec::with_capacity(map.len() * self.branches);
        let mut bwd = Vec::with_capacity(map.len() * self.branches);
        for cell in map {
            fwd.extend_from_slice(self.alpha_row(cell));
            bwd.extend_from_slice(self.beta_row(cell));
        }
        Ok((fwd, bwd))
    }
}

fn cell_count(granularity: Granularity, layout: &FrameLayout) -> usize {
    match granularity {
        Granularity::Batch => 1,
        Granularity::Sample => layout.batch(),
        Granularity::Frame => layout.rows(),
    }
}

/// Normalizes positive draws onto the simplex.
pub fn simplex_from_exponentials(draws: &[f64]) -> Vec<f64> {
    let total: f64 = draws.iter().sum();
    draws.iter().map(|d| d / total).collect()
}

/// Uniform draw from the `(n-1)`-simplex via normalized unit exponentials.
pub fn sample_simplex<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Result<Vec<f64>> {
    if n == 0 {
        return Err(Error::Param("simplex needs at least one coordinate".into()));
    }
    if n == 1 {
        return Ok(vec![1.0]);
    }
    loop {
        let draws: Vec<f64> = (0..n).map(|_| rng.sample::<f64, _>(Exp1)).collect();
        // All-zero draws have probability zero but would divide by zero.
        if draws.iter().sum::<f64>() > 0.0 {
            return Ok(simplex_from_exponentials(&draws));
        }
    }
}

/// Draws coefficients for one shaken band.
///
/// Train phase draws an independent alpha row and beta row per cell; eval
/// phase yields the expectation `1/N` everywhere.
pub fn make_shake_coefficients<R: Rng + ?Sized>(
    granularity: Granularity,
    layout: &FrameLayout,
    branches: usize,
    rng: &mut R,
    phase: Phase,
) -> Result<ShakeCoefficients> {
    if branches == 0 {
        return Err(Error::Param("shake needs at least one branch".into()));
    }
    let cells = cell_count(granularity, layout);
    match phase {
        Phase::Eval => {
            let mean = vec![1.0 / branches as f64; branches];
            ShakeCoefficients::constant(granularity, layout, &mean, &mean)
        }
        Phase::Train => {
            let mut alphas = Vec::with_capacity(cells * branches);
            let mut betas = Vec::with_capacity(cells * branches);
            for _ in 0..cells {
                alphas.extend(sample_simplex(branches, rng)?);
            }
            for _ in 0..cells {
                betas.extend(sample_simplex(branches, rng)?);
            }
            Ok(ShakeCoefficients {
                alphas,
                betas,
                branches,
                granularity,
            })
        }
    }
}

/// The two halves of a tensor split at the midpoint of its spectral axis.
#[derive(Debug, Clone, PartialEq)]
pub struct SubbandPair {
    /// Indices `[floor(F/2), F)`: the high-frequency half.
    pub upper: Tensor,
    /// Indices `[0, floor(F/2))`: the low-frequency half.
    pub lower: Tensor,
    pub source_dims: Vec<usize>,
    pub axis: usize,
}

impl SubbandPair {
    /// Reassembles the source tensor.
    pub fn merge(&self) -> Result<Tensor> {
        Tensor::concat(&[&self.lower, &self.upper], self.axis)
    }
}

fn split_point(dims: &[usize], axis: usize) -> Result<(usize, usize)> {
    let width = *dims
        .get(axis)
        .ok_or_else(|| Error::shape("split_subbands", format!("axis < {}", dims.len()), axis))?;
    if width < 2 {
        return Err(Error::BandTooNarrow { width });
    }
    let lower = width / 2;
    Ok((lower, width - lower))
}

pub fn split_subbands(x: &Tensor, axis: usize) -> Result<SubbandPair> {
    let (lo, hi) = split_point(x.dims(), axis)?;
    Ok(SubbandPair {
        lower: x.narrow(axis, 0, lo)?,
        upper: x.narrow(axis, lo, hi)?,
        source_dims: x.dims().to_vec(),
        axis,
    })
}

/// `sum_n alpha_n B_n` forward with `beta_n g` routed back to branch `n`; the
/// eval phase returns the branch mean.
pub fn shake_aggregate(
    graph: &mut Graph,
    branches: &[Var],
    coeffs: &ShakeCoefficients,
    layout: &FrameLayout,
    phase: Phase,
) -> Result<Var> {
    let n = branches.len();
    if n == 0 || coeffs.branches != n {
        return Err(Error::shape(
            "shake_aggregate",
            format!("{} branches", coeffs.branches),
            n,
        ));
    }
    let rows = graph.dims(branches[0])[0];
    if rows != layout.rows() {
        return Err(Error::shape(
            "shake_aggregate",
            format!("{} rows from layout", layout.rows()),
            rows,
        ));
    }
    match phase {
        Phase::Train => {
            let (fwd, bwd) = coeffs.per_row(layout)?;
            graph.shake(branches, &fwd, &bwd)
        }
        Phase::Eval => {
            let mean = vec![1.0 / n as f64; rows * n];
            graph.shake(branches, &mean, &mean)
        }
    }
}

/// Coefficients for every band a mode shakes.
#[derive(Debug, Clone, PartialEq)]
pub enum BlockCoefficients {
    None,
    Full(ShakeCoefficients),
    Upper(ShakeCoefficients),
    Lower(ShakeCoefficients),
    Both {
        upper: ShakeCoefficients,
        lower: ShakeCoefficients,
    },
}

impl BlockCoefficients {
    /// Draws what `mode` needs. For `Both` the upper band is drawn first.
    pub fn sample<R: Rng + ?Sized>(
        mode: ShakeMode,
        granularity: Granularity,
        layout: &FrameLayout,
        branches: usize,
        rng: &mut R,
        phase: Phase,
    ) -> Result<Self> {
        let draw = |rng: &mut R| make_shake_coefficients(granularity, layout, branches, rng, phase);
        Ok(match mode {
            ShakeMode::None => BlockCoefficients::None,
            ShakeMode::Full => BlockCoefficients::Full(draw(rng)?),
            ShakeMode::Upper => BlockCoefficients::Upper(draw(rng)?),
            ShakeMode::Lower => BlockCoefficients::Lower(draw(rng)?),
            ShakeMode::Both => {
                let upper = draw(rng)?;
                let lower = draw(rng)?;
                BlockCoefficients::Both { upper, lower }
            }
        })
    }

    pub fn mode(&self) -> ShakeMode {
        match self {
            BlockCoefficients::None => ShakeMode::None,
            BlockCoefficients::Full(_) => ShakeMode::Full,
            BlockCoefficients::Upper(_) => ShakeMode::Upper,
            BlockCoefficients::Lower(_) => ShakeMode::Lower,
            BlockCoefficients::Both { .. } => ShakeMode::Both,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BlockOptions {
    pub spectral_axis: usize,
    /// Use the branch mean instead of the sum for an unshaken sub-band.
    pub normalize_unshaken: bool,
}

impl Default for BlockOptions {
    fn default() -> Self {
        BlockOptions {
            spectral_axis: SPECTRAL_AXIS,
            normalize_unshaken: false,
        }
    }
}

fn unshaken(graph: &mut Graph, parts: &[Var], normalize: bool) -> Result<Var> {
    let s = graph.sum_n(parts)?;
    Ok(if normalize {
        graph.scale(s, 1.0 / parts.len() as f64)
    } else {
        s
    })
}

/// `x + merge(branches)` under the sub-band rule selected by `coeffs`.
pub fn residual_shake_block(
    graph: &mut Graph,
    x: Var,
    branches: &[Var],
    coeffs: &BlockCoefficients,
    layout: &FrameLayout,
    phase: Phase,
    options: BlockOptions,
) -> Result<Var> {
    let first = *branches
        .first()
        .ok_or_else(|| Error::Param("residual block needs at least one branch".into()))?;
    for &b in branches {
        if graph.dims(b) != graph.dims(x) {
            return Err(Error::shape(
                "residual_shake_block",
                format!("{:?}", graph.dims(x)),
                format!("{:?}", graph.dims(b)),
            ));
        }
    }
    let axis = options.spectral_axis;
    let merged = match coeffs {
        BlockCoefficients::None => graph.sum_n(branches)?,
        BlockCoefficients::Full(c) => shake_aggregate(graph, branches, c, layout, phase)?,
        BlockCoefficients::Upper(_) | BlockCoefficients::Lower(_) | BlockCoefficients::Both { .. } => {
            let (lo, hi) = split_point(graph.dims(first), axis)?;
            let mut lowers = Vec::with_capacity(branches.len());
            let mut uppers = Vec::with_capacity(branches.len());
            for &b in branches {
                lowers.push(graph.narrow(b, axis, 0, lo)?);
                uppers.push(graph.narrow(b, axis, lo, hi)?);
            }
            let norm = options.normalize_unshaken;
            let (y_lower, y_upper) = match coeffs {
                BlockCoefficients::Upper(c) => (
                    unshaken(graph, &lowers, norm)?,
                    shake_aggregate(graph, &uppers, c, layout, phase)?,
                ),
                BlockCoefficients::Lower(c) => (
                    shake_aggregate(graph, &lowers, c, layout, phase)?,
                    unshaken(graph, &uppers, norm)?,
                ),
                BlockCoefficients::Both { upper, lower } => (
                    shake_aggregate(graph, &lowers, lower, layout, phase)?,
                    shake_aggregate(graph, &uppers, upper, layout, phase)?,
                ),
                _ => unreachable!(),
            };
            graph.concat(&[y_lower, y_upper], axis)?
        }
    };
    graph.add(x, merged)
}
