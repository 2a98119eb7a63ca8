//! Dense optical flow with the Horn–Schunck variational method.
//!
//! The solver minimises
//!
//! ```text
//! E(u, v) = Σ_p (Ix·u + Iy·v + It)² + α² Σ_{p~q} ((u_p − u_q)² + (v_p − v_q)²)
//! ```
//!
//! over 4-connected neighbour pairs with block-Jacobi sweeps. Each sweep sets
//! every pixel to the exact minimiser given its neighbours' previous values,
//! which never increases `E`.

use crate::error::{MooseError, Result};
use crate::tensor::Tensor;

/// Luminance weights for three-channel frames.
pub const LUMA: [f64; 3] = [0.299, 0.587, 0.114];

/// Frames live in `[0, 1]`; the solver works on an 8-bit intensity scale so
/// that `alpha` keeps its customary meaning.
pub const INTENSITY_SCALE: f64 = 255.0;

/// Multiply-accumulates per pixel per Jacobi sweep: two neighbour means,
/// the residual (2), and the two scaled corrections (4).
pub const MACS_PER_PIXEL_SWEEP: u64 = 8;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FlowParams {
    pub alpha: f64,
    pub iterations: usize,
}

impl Default for FlowParams {
    fn default() -> Self {
        FlowParams {
            alpha: 1.0,
            iterations: 100,
        }
    }
}

impl FlowParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(MooseError::invalid(format!(
                "flow alpha must be > 0, got {}",
                self.alpha
            )));
        }
        if self.iterations == 0 {
            return Err(MooseError::invalid("flow iterations must be >= 1"));
        }
        Ok(())
    }

    /// Solver multiply-accumulates for one `width × height` frame pair.
    pub fn macs(&self, width: usize, height: usize) -> u64 {
        self.iterations as u64 * (width * height) as u64 * MACS_PER_PIXEL_SWEEP
    }
}

/// Per-clip velocity fields, `[T × 2 × H × W]`; channel 0 is horizontal
/// motion `u`, channel 1 vertical motion `v` (positive downward), both in
/// pixels per frame.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowField {
    pub flows: Tensor,
    pub source_pairs: usize,
}

impl FlowField {
    pub fn new(flows: Tensor) -> Result<Self> {
        match flows.shape() {
            &[t, 2, _, _] if flows.is_finite() => Ok(FlowField {
                flows,
                source_pairs: t,
            }),
            s => Err(MooseError::InvalidShape {
                shape: s.to_vec(),
                reason: "flow field must be [T x 2 x H x W] and finite".into(),
            }),
        }
    }

    pub fn pair(&self, t: usize) -> Result<Tensor> {
        self.flows.slab(t)
    }

    pub fn height(&self) -> usize {
        self.flows.shape()[2]
    }

    pub fn width(&self) -> usize {
        self.flows.shape()[3]
    }
}

/// Converts a `[C × H × W]` frame to one luminance plane.
pub fn luminance(frame: &Tensor) -> Result<Vec<f64>> {
    let &[c, h, w] = frame.shape() else {
        return Err(MooseError::InvalidShape {
            shape: frame.shape().to_vec(),
            reason: "expected a [C x H x W] frame".into(),
        });
    };
    let plane = h * w;
    let d = frame.data();
    match c {
        1 => Ok(d.to_vec()),
        3 => Ok((0..plane)
            .map(|p| LUMA[0] * d[p] + LUMA[1] * d[plane + p] + LUMA[2] * d[2 * plane + p])
            .collect()),
        _ => Err(MooseError::invalid(format!(
            "cannot take luminance of {c} channels"
        ))),
    }
}

struct Problem {
    w: usize,
    h: usize,
    ix: Vec<f64>,
    iy: Vec<f64>,
    it: Vec<f64>,
    alpha2: f64,
}

impl Problem {
    fn new(frame_a: &Tensor, frame_b: &Tensor, params: &FlowParams) -> Result<Self> {
        params.validate()?;
        if frame_a.shape() != frame_b.shape() {
            return Err(MooseError::shape(
                "estimate_flow",
                frame_a.shape(),
                frame_b.shape(),
            ));
        }
        let (h, w) = match frame_a.shape() {
            &[_, h, w] => (h, w),
            s => return Err(MooseError::shape("estimate_flow", s, &[0, 0, 0])),
        };
        if w < 3 || h < 3 {
            return Err(MooseError::invalid(format!(
                "flow stencil needs W, H >= 3, got {w}x{h}"
            )));
        }
        let a: Vec<f64> = luminance(frame_a)?
            .into_iter()
            .map(|v| v * INTENSITY_SCALE)
            .collect();
        let b: Vec<f64> = luminance(frame_b)?
            .into_iter()
            .map(|v| v * INTENSITY_SCALE)
            .collect();
        let n = w * h;
        let (mut ix, mut iy, mut it) = (vec![0.0; n], vec![0.0; n], vec![0.0; n]);
        // Central differences with replicated borders, averaged over both frames.
        for y in 0..h {
            let (ym, yp) = (y.saturating_sub(1), (y + 1).min(h - 1));
            for x in 0..w {
                let (xm, xp) = (x.saturating_sub(1), (x + 1).min(w - 1));
                let p = y * w + x;
                let dx = |img: &[f64]| 0.5 * (img[y * w + xp] - img[y * w + xm]);
                let dy = |img: &[f64]| 0.5 * (img[yp * w + x] - img[ym * w + x]);
                ix[p] = 0.5 * (dx(&a) + dx(&b));
                iy[p] = 0.5 * (dy(&a) + dy(&b));
                it[p] = b[p] - a[p];
            }
        }
        Ok(Problem {
            w,
            h,
            ix,
            iy,
            it,
            alpha2: params.alpha * params.alpha,
        })
    }

    fn neighbours(&self, x: usize, y: usize) -> impl Iterator<Item = usize> + '_ {
        let w = self.w;
        [
            (x > 0).then(|| y * w + x - 1),
            (x + 1 < w).then(|| y * w + x + 1),
            (y > 0).then(|| (y - 1) * w + x),
            (y + 1 < self.h).then(|| (y + 1) * w + x),
        ]
        .into_iter()
        .flatten()
    }

    fn energy(&self, u: &[f64], v: &[f64]) -> f64 {
        let (w, h) = (self.w, self.h);
        let mut data = 0.0;
        for p in 0..w * h {
            let r = self.ix[p] * u[p] + self.iy[p] * v[p] + self.it[p];
            data += r * r;
        }
        let mut smooth = 0.0;
        for y in 0..h {
            for x in 0..w {
                let p = y * w + x;
                if x + 1 < w {
                    smooth += (u[p] - u[p + 1]).powi(2) + (v[p] - v[p + 1]).powi(2);
                }
                if y + 1 < h {
                    smooth += (u[p] - u[p + w]).powi(2) + (v[p] - v[p + w]).powi(2);
                }
            }
        }
        data + self.alpha2 * smooth
    }

    fn solve(
        &self,
        iterations: usize,
        mut on_sweep: impl FnMut(&[f64], &[f64]),
    ) -> (Vec<f64>, Vec<f64>) {
        let (w, h) = (self.w, self.h);
        let n = w * h;
        let mut deg = vec![0.0; n];
        let mut inv_denom = vec![0.0; n];
        for y in 0..h {
            for x in 0..w {
                let p = y * w + x;
                deg[p] = self.neighbours(x, y).count() as f64;
                inv_denom[p] = 1.0
                    / (self.alpha2 * deg[p] + self.ix[p] * self.ix[p] + self.iy[p] * self.iy[p]);
            }
        }
        let (mut u, mut v) = (vec![0.0; n], vec![0.0; n]);
        let (mut nu, mut nv) = (vec![0.0; n], vec![0.0; n]);
        for _ in 0..iterations {
            for y in 0..h {
                for x in 0..w {
                    let p = y * w + x;
                    let (mut su, mut sv) = (0.0, 0.0);
                    for q in self.neighbours(x, y) {
                        su += u[q];
                        sv += v[q];
                    }
                    let ubar = su / deg[p];
                    let vbar = sv / deg[p];
                    let r = self.ix[p] * ubar + self.iy[p] * vbar + self.it[p];
                    nu[p] = ubar - self.ix[p] * r * inv_denom[p];
                    nv[p] = vbar - self.iy[p] * r * inv_denom[p];
                }
            }
            std::mem::swap(&mut u, &mut nu);
            std::mem::swap(&mut v, &mut nv);
            on_sweep(&u, &v);
        }
        (u, v)
    }

    fn into_tensor(&self, u: Vec<f64>, v: Vec<f64>) -> Tensor {
        let mut data = u;
        data.extend(v);
        Tensor::from_parts(vec![2, self.h, self.w], data)
    }
}

/// Flow from `frame_a` to `frame_b`, both `[C × H × W]`; returns `[2 × H × W]`.
pub fn estimate_flow(frame_a: &Tensor, frame_b: &Tensor, params: &FlowParams) -> Result<Tensor> {
    let problem = Problem::new(frame_a, frame_b, params)?;
    let (u, v) = problem.solve(params.iterations, |_, _| {});
    Ok(problem.into_tensor(u, v))
}

/// Like [`estimate_flow`], also returning the energy before the first sweep
/// followed by the energy after each sweep.
pub fn estimate_flow_with_energy(
    frame_a: &Tensor,
    frame_b: &Tensor,
    params: &FlowParams,
) -> Result<(Tensor, Vec<f64>)> {
    let problem = Problem::new(frame_a, frame_b, params)?;
    let n = problem.w * problem.h;
    let mut energies = vec![problem.energy(&vec![0.0; n], &vec![0.0; n])];
    let (u, v) = problem.solve(params.iterations, |u, v| {
        energies.push(problem.energy(u, v))
    });
    Ok((problem.into_tensor(u, v), energies))
}

/// Flow between consecutive frames of a `[(T+1) × C × H × W]` stack.
pub fn frames_flow(frames: &Tensor, params: &FlowParams) -> Result<FlowField> {
    let count = frames.shape().first().copied().unwrap_or(0);
    if frames.ndim() != 4 || count < 2 {
        return Err(MooseError::invalid(format!(
            "flow extraction needs at least 2 frames, got shape {:?}",
            frames.shape()
        )));
    }
    let mut pairs = Vec::with_capacity(count - 1);
    let mut prev = frames.slab(0)?;
    for t in 1..count {
        let next = frames.slab(t)?;
        pairs.push(estimate_flow(&prev, &next, params)?);
        prev = next;
    }
    FlowField::new(Tensor::stack(&pairs)?)
}

/// Per-clip standardisation of each flow channel over all pairs and pixels.
/// A channel with (numerically) zero spread is only centred, so static clips
/// stay exactly zero.
pub fn standardize(field: &FlowField) -> Tensor {
    let &[t, c, h, w] = field.flows.shape() else {
        unreachable!("FlowField invariant")
    };
    let plane = h * w;
    let mut data = field.flows.data().to_vec();
    for ch in 0..c {
        let idx = |k: usize| (k / plane) * c * plane + ch * plane + k % plane;
        let count = (t * plane) as f64;
        let mean = (0..t * plane).map(|k| data[idx(k)]).sum::<f64>() / count;
        let var = (0..t * plane)
            .map(|k| (data[idx(k)] - mean).powi(2))
            .sum::<f64>()
            / count;
        let std = var.sqrt();
        let inv = if std > 1e-12 { 1.0 / std } else { 1.0 };
        for k in 0..t * plane {
            let i = idx(k);
            data[i] = (data[i] - mean) * inv;
        }
    }
    Tensor::from_parts(field.flows.shape().to_vec(), data)
}
