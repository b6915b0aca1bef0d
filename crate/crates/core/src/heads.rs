//! Supervision heads, objectives and segment decoding for both settings.

use crate::config::LossVariant;
use crate::datapack::DerivedLabels;
use crate::error::{dim_err, Error, Result};
use crate::nn::{Init, Session};
use crate::numkit::{ParamId, Tensor, Var, ZeroSlice, L1_EPS};

/// Clamp used inside every log.
pub const LOG_EPS: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FullyHeadParams {
    /// d_f x 1, event relevance
    pub w3: ParamId,
    /// d_f x (C-1), category logits
    pub w4: ParamId,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct WeakHeadParams {
    /// d_f x d_h
    pub w4: ParamId,
    /// d_h x C
    pub w5: ParamId,
    /// C x 1
    pub w6: ParamId,
}

impl FullyHeadParams {
    pub fn init(init: &mut Init, d_f: usize, c: usize) -> Result<Self> {
        Ok(FullyHeadParams {
            w3: init.uniform("head.w3", &[d_f, 1], d_f)?,
            w4: init.uniform("head.w4", &[d_f, c - 1], d_f)?,
        })
    }
}

impl WeakHeadParams {
    pub fn init(init: &mut Init, d_f: usize, d_h: usize, c: usize) -> Result<Self> {
        Ok(WeakHeadParams {
            w4: init.uniform("head.w4", &[d_f, d_h], d_f)?,
            w5: init.uniform("head.w5", &[d_h, c], d_h)?,
            w6: init.uniform("head.w6", &[c, 1], c)?,
        })
    }
}

pub struct FullyOutput {
    /// B x T relevance probabilities.
    pub o_t: Var,
    /// B x (C-1) category logits.
    pub o_c: Var,
    /// B x T l1-normalized audio-visual similarity.
    pub s: Var,
    /// Per sample: similarity mass below `L1_EPS`, so `s` is all zeros.
    pub degenerate: Vec<bool>,
}

impl FullyOutput {
    pub fn require_similarity(&self) -> Result<()> {
        match self.degenerate.iter().position(|&d| d) {
            Some(i) => Err(Error::Degenerate(format!("sample {i}: audio-visual similarity has zero l1 mass"))),
            None => Ok(()),
        }
    }
}

pub fn fully_forward(s: &mut Session, f_av: Var, a_isce: Var, v_isce: Var, p: &FullyHeadParams) -> Result<FullyOutput> {
    let d = s.g.dims(f_av).to_vec();
    if d.len() != 3 || s.g.dims(a_isce) != s.g.dims(v_isce) || s.g.dims(a_isce)[..2] != d[..2] {
        return dim_err(format!(
            "fully_forward: f_av {d:?}, a {:?}, v {:?}",
            s.g.dims(a_isce),
            s.g.dims(v_isce)
        ));
    }
    let (b, t) = (d[0], d[1]);
    let (w3, w4) = (s.p(p.w3), s.p(p.w4));
    let o_t = s.g.linear(f_av, w3)?;
    let o_t = s.g.reshape(o_t, vec![b, t])?;
    let o_t = s.g.sigmoid(o_t)?;
    let pooled = s.g.max_axis(f_av, 1)?;
    let o_c = s.g.matmul(pooled, w4)?;
    let sim = s.g.mul(v_isce, a_isce)?;
    let sim = s.g.sum_axis(sim, 2)?;
    let sim = s.g.reshape(sim, vec![b, t])?;
    let sim = s.g.relu(sim)?;
    let degenerate = s
        .g
        .value(sim)
        .data()
        .chunks(t)
        .map(|row| row.iter().sum::<f64>() < L1_EPS)
        .collect();
    let sn = s.g.l1_normalize(sim, 1, ZeroSlice::Keep)?;
    Ok(FullyOutput {
        o_t,
        o_c,
        s: sn,
        degenerate,
    })
}

/// Batched label tensors for the fully-supervised objective.
pub struct FullyTargets {
    /// B x T
    pub y_t: Tensor,
    /// B x T x (C-1)
    pub y_tc: Tensor,
    /// B x T
    pub y_tl: Tensor,
}

impl FullyTargets {
    pub fn new(labels: &[DerivedLabels]) -> Result<Self> {
        let first = labels
            .first()
            .ok_or_else(|| Error::Label("empty label batch".into()))?;
        let (t, cm1) = (first.bg_mask.len(), first.cat_rows.len() / first.bg_mask.len());
        let mut y_t = Vec::new();
        let mut y_tc = Vec::new();
        let mut y_tl = Vec::new();
        for l in labels {
            if l.bg_mask.len() != t || l.cat_rows.len() != t * cm1 {
                return Err(Error::Label("ragged label batch".into()));
            }
            y_t.extend_from_slice(&l.bg_mask);
            y_tc.extend_from_slice(&l.cat_rows);
            y_tl.extend_from_slice(&l.bg_l1);
        }
        let b = labels.len();
        Ok(FullyTargets {
            y_t: Tensor::new(vec![b, t], y_t)?,
            y_tc: Tensor::new(vec![b, t, cm1], y_tc)?,
            y_tl: Tensor::new(vec![b, t], y_tl)?,
        })
    }
}

/// Loss terms; absent terms are `None`.
pub struct LossParts {
    pub total: Var,
    pub l_c: Option<Var>,
    pub l_t: Option<Var>,
    pub l_avps: Option<Var>,
    /// Samples left out of `l_avps` because their similarity was degenerate.
    pub skipped_avps: usize,
}

/// Mean binary cross-entropy with clamped logs.
pub fn bce(s: &mut Session, p: Var, y: Var) -> Result<Var> {
    let lp = s.g.ln_clamped(p, LOG_EPS)?;
    let q = s.g.one_minus(p)?;
    let lq = s.g.ln_clamped(q, LOG_EPS)?;
    let ny = s.g.one_minus(y)?;
    let a = s.g.mul(y, lp)?;
    let b = s.g.mul(ny, lq)?;
    let sum = s.g.add(a, b)?;
    let m = s.g.mean_all(sum)?;
    s.g.scale(m, -1.0)
}

/// `-(1/(B T (C-1))) sum Y_tc log_softmax(O_c)` with O_c shared by every segment.
fn category_loss(s: &mut Session, o_c: Var, y_tc: Var) -> Result<Var> {
    let d = s.g.dims(y_tc).to_vec();
    let lsm = s.g.log_softmax(o_c, 1)?;
    let lsm = s.g.reshape(lsm, vec![d[0], 1, d[2]])?;
    let lsm = s.g.broadcast_to(lsm, d.clone())?;
    let m = s.g.mul(y_tc, lsm)?;
    let m = s.g.mean_all(m)?;
    s.g.scale(m, -1.0)
}

/// Mean squared error over the non-degenerate samples.
fn avps_loss(s: &mut Session, sim: Var, y_tl: Var, degenerate: &[bool]) -> Result<(Var, usize)> {
    let d = s.g.dims(sim).to_vec();
    let kept = degenerate.iter().filter(|&&x| !x).count();
    let skipped = degenerate.len() - kept;
    if kept == 0 {
        return Ok((s.g.constant(Tensor::scalar(0.0)?), skipped));
    }
    let mask: Vec<f64> = degenerate
        .iter()
        .flat_map(|&deg| std::iter::repeat_n(if deg { 0.0 } else { 1.0 }, d[1]))
        .collect();
    let mask = s.g.constant(Tensor::new(d.clone(), mask)?);
    let diff = s.g.sub(sim, y_tl)?;
    let sq = s.g.mul(diff, diff)?;
    let sq = s.g.mul(sq, mask)?;
    let total = s.g.sum_all(sq)?;
    Ok((s.g.scale(total, 1.0 / (kept * d[1]) as f64)?, skipped))
}

pub fn loss_fully(
    s: &mut Session,
    out: &FullyOutput,
    targets: &FullyTargets,
    variant: LossVariant,
    lambda_avps: f64,
) -> Result<LossParts> {
    let y_t = s.g.constant(targets.y_t.clone());
    let y_tc = s.g.constant(targets.y_tc.clone());
    let y_tl = s.g.constant(targets.y_tl.clone());
    if s.g.dims(y_t) != s.g.dims(out.o_t) {
        return dim_err(format!("loss_fully: O_t {:?}, Y_t {:?}", s.g.dims(out.o_t), s.g.dims(y_t)));
    }
    let l_c = category_loss(s, out.o_c, y_tc)?;
    let l_t = bce(s, out.o_t, y_t)?;
    let avps = |s: &mut Session| -> Result<(Var, usize)> {
        let (l, skipped) = avps_loss(s, out.s, y_tl, &out.degenerate)?;
        if skipped > 0 {
            log::warn!("{skipped} sample(s) with degenerate similarity left out of L_avps");
        }
        Ok((l, skipped))
    };
    let parts = match variant {
        LossVariant::Full => {
            let (l_a, skipped) = avps(s)?;
            let sum = s.g.add(l_c, l_t)?;
            let total = s.g.add(sum, l_a)?;
            LossParts { total, l_c: Some(l_c), l_t: Some(l_t), l_avps: Some(l_a), skipped_avps: skipped }
        }
        LossVariant::CtOnly => {
            let total = s.g.add(l_c, l_t)?;
            LossParts { total, l_c: Some(l_c), l_t: Some(l_t), l_avps: None, skipped_avps: 0 }
        }
        LossVariant::CeAvps => {
            // C-way cross-entropy with p(bg) = 1 - O_t and p(k) = O_t softmax(O_c)_k:
            // -log p splits into the relevance BCE plus the category term per segment.
            let (l_a, skipped) = avps(s)?;
            let cm1 = s.g.dims(y_tc)[2] as f64;
            let per_seg = s.g.scale(l_c, cm1)?;
            let l_ce = s.g.add(l_t, per_seg)?;
            let weighted = s.g.scale(l_a, lambda_avps)?;
            let total = s.g.add(l_ce, weighted)?;
            LossParts { total, l_c: Some(l_ce), l_t: None, l_avps: Some(l_a), skipped_avps: skipped }
        }
        LossVariant::BceOnly => {
            return Err(Error::Config("loss variant bce_only belongs to the weakly-supervised mode".into()))
        }
    };
    Ok(parts)
}

/// Decode one video. `o_t`: T scores, `o_c`: C-1 logits, `fg`: foreground class table.
pub fn infer_fully(o_t: &[f64], o_c: &[f64], tau_b: f64, fg: &[usize], background_index: usize) -> Vec<usize> {
    let cls = fg[argmax(o_c)];
    o_t.iter().map(|&p| if p > tau_b { cls } else { background_index }).collect()
}

/// Index of the first maximum.
pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

pub struct WeakOutput {
    /// B x T x C segment scores.
    pub f_h: Var,
    /// B x T segment weights.
    pub phi: Var,
    /// B x C video-level probabilities.
    pub o_w: Var,
}

pub fn weak_forward(s: &mut Session, f_av: Var, p: &WeakHeadParams) -> Result<WeakOutput> {
    let d = s.g.dims(f_av).to_vec();
    if d.len() != 3 {
        return dim_err(format!("weak_forward: f_av {d:?}"));
    }
    let (w4, w5, w6) = (s.p(p.w4), s.p(p.w5), s.p(p.w6));
    let hidden = s.g.linear(f_av, w4)?;
    let f_h = s.g.linear(hidden, w5)?;
    let c = s.g.dims(f_h)[2];
    let phi = s.g.linear(f_h, w6)?;
    let phi = s.g.sigmoid(phi)?;
    let phi_c = s.g.broadcast_to(phi, vec![d[0], d[1], c])?;
    let weighted = s.g.mul(f_h, phi_c)?;
    let pooled = s.g.mean_axis(weighted, 1)?;
    let o_w = s.g.softmax(pooled, 1)?;
    let phi = s.g.reshape(phi, vec![d[0], d[1]])?;
    Ok(WeakOutput { f_h, phi, o_w })
}

/// `lambda * BCE(O_w, Y) + BCE(softmax(O_w), Y)`, or the plain BCE for `BceOnly`.
pub fn loss_weak(s: &mut Session, o_w: Var, y: &Tensor, lambda: f64, variant: LossVariant) -> Result<Var> {
    if let Some(bad) = y.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(Error::Label(format!("video label entry {bad} outside [0, 1]")));
    }
    if s.g.dims(o_w) != y.dims() {
        return dim_err(format!("loss_weak: O_w {:?}, Y {:?}", s.g.dims(o_w), y.dims()));
    }
    let yv = s.g.constant(y.clone());
    let plain = bce(s, o_w, yv)?;
    match variant {
        LossVariant::BceOnly => Ok(plain),
        LossVariant::Full => {
            let smooth = s.g.softmax(o_w, 1)?;
            let smooth = bce(s, smooth, yv)?;
            let scaled = s.g.scale(plain, lambda)?;
            s.g.add(scaled, smooth)
        }
        other => Err(Error::Config(format!("loss variant {other} is not defined for the weakly-supervised mode"))),
    }
}

/// Per-segment argmax over the C scores of one video (`f_h`: T x C, row-major).
pub fn infer_weak(f_h: &[f64], c: usize) -> Vec<usize> {
    f_h.chunks(c).map(argmax).collect()
}
