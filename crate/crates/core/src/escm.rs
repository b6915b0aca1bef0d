//! Event semantic consistency modeling.
//!
//! Shared temporal CNN blocks turn each modality's segment features into a
//! short video-level event representation; the two are averaged into one
//! joint representation that seeds two independent bidirectional GRUs. A
//! per-modality projection with layer norm and a late average close the
//! block.

use crate::config::ModelConfig;
use crate::error::{dim_err, Error, Result};
use crate::nn::{Init, LayerNormParams, Session};
use crate::numkit::{Padding, ParamId, Tensor, Var};

/// Two conv blocks; one instance is referenced by both modalities unless the
/// unshared ablation asks for two.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CereParams {
    /// d_e x d_s x k
    pub k1: ParamId,
    pub b1: ParamId,
    /// d_e x d_e x k
    pub k2: ParamId,
    pub b2: ParamId,
}

/// Cho GRU. Gate column order in `w_ih` and `b` is (reset, update, candidate).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GruParams {
    /// d_in x 3h
    pub w_ih: ParamId,
    /// h x 2h, recurrent weights of the reset and update gates
    pub u_rz: ParamId,
    /// h x h, recurrent weight of the candidate
    pub u_n: ParamId,
    /// 3h
    pub b: ParamId,
    pub hidden: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BiGruParams {
    pub fwd: GruParams,
    pub bwd: GruParams,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct IsceParams {
    pub gru_a: BiGruParams,
    pub gru_v: BiGruParams,
}

/// Bias-free projections and per-modality layer norms of the late fusion.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FuseParams {
    pub w_a: ParamId,
    pub w_v: ParamId,
    pub ln_a: LayerNormParams,
    pub ln_v: LayerNormParams,
}

impl CereParams {
    pub fn init(init: &mut Init, name: &str, d_s: usize, d_e: usize, k: usize) -> Result<Self> {
        Ok(CereParams {
            k1: init.uniform(&format!("{name}.k1"), &[d_e, d_s, k], d_s * k)?,
            b1: init.zeros(&format!("{name}.b1"), &[d_e])?,
            k2: init.uniform(&format!("{name}.k2"), &[d_e, d_e, k], d_e * k)?,
            b2: init.zeros(&format!("{name}.b2"), &[d_e])?,
        })
    }

    pub fn ids(&self) -> [ParamId; 4] {
        [self.k1, self.b1, self.k2, self.b2]
    }
}

impl GruParams {
    pub fn init(init: &mut Init, name: &str, d_in: usize, hidden: usize) -> Result<Self> {
        Ok(GruParams {
            w_ih: init.uniform(&format!("{name}.w_ih"), &[d_in, 3 * hidden], hidden)?,
            u_rz: init.uniform(&format!("{name}.u_rz"), &[hidden, 2 * hidden], hidden)?,
            u_n: init.uniform(&format!("{name}.u_n"), &[hidden, hidden], hidden)?,
            b: init.zeros(&format!("{name}.b"), &[3 * hidden])?,
            hidden,
        })
    }
}

impl BiGruParams {
    pub fn init(init: &mut Init, name: &str, d_in: usize, hidden: usize) -> Result<Self> {
        Ok(BiGruParams {
            fwd: GruParams::init(init, &format!("{name}.fwd"), d_in, hidden)?,
            bwd: GruParams::init(init, &format!("{name}.bwd"), d_in, hidden)?,
        })
    }
}

impl IsceParams {
    pub fn init(init: &mut Init, cfg: &ModelConfig) -> Result<Self> {
        let d = &cfg.dims;
        Ok(IsceParams {
            gru_a: BiGruParams::init(init, "escm.isce.gru_a", d.d_s, d.d_e)?,
            gru_v: BiGruParams::init(init, "escm.isce.gru_v", d.d_s, d.d_e)?,
        })
    }
}

impl FuseParams {
    pub fn init(init: &mut Init, d_in: usize, d_f: usize) -> Result<Self> {
        Ok(FuseParams {
            w_a: init.uniform("fuse.w_a", &[d_in, d_f], d_in)?,
            w_v: init.uniform("fuse.w_v", &[d_in, d_f], d_in)?,
            ln_a: LayerNormParams::init(init, "fuse.ln_a", d_f)?,
            ln_v: LayerNormParams::init(init, "fuse.ln_v", d_f)?,
        })
    }
}

/// x_seg: B x T x d_s -> B x d_e x (T / 2 / 2).
pub fn cere(s: &mut Session, x_seg: Var, p: &CereParams) -> Result<Var> {
    let d = s.g.dims(x_seg).to_vec();
    if d.len() != 3 {
        return dim_err(format!("cere: expected B x T x d_s, got {d:?}"));
    }
    if d[1] < 4 {
        return Err(Error::Config(format!("cere needs at least 4 segments, got {}", d[1])));
    }
    let x = s.g.permute(x_seg, &[0, 2, 1])?;
    let (k1, b1, k2, b2) = (s.p(p.k1), s.p(p.b1), s.p(p.k2), s.p(p.b2));
    let y = s.g.conv1d(x, k1, b1, Padding::Same)?;
    let y = s.g.relu(y)?;
    let y = s.g.maxpool1d(y)?;
    let y = s.g.conv1d(y, k2, b2, Padding::Same)?;
    let y = s.g.relu(y)?;
    s.g.maxpool1d(y)
}

/// Both branches through one parameter set.
pub fn shared_cere_pair(s: &mut Session, a_seg: Var, v_seg: Var, p: &CereParams) -> Result<(Var, Var)> {
    if s.g.dims(a_seg) != s.g.dims(v_seg) {
        return dim_err(format!("shared_cere_pair: {:?} vs {:?}", s.g.dims(a_seg), s.g.dims(v_seg)));
    }
    Ok((cere(s, a_seg, p)?, cere(s, v_seg, p)?))
}

/// `0.5 * (a^T + v^T)`: B x d_e x L -> B x L x d_e.
pub fn fuse_event(s: &mut Session, a_event: Var, v_event: Var) -> Result<Var> {
    if s.g.dims(a_event) != s.g.dims(v_event) {
        return dim_err(format!("fuse_event: {:?} vs {:?}", s.g.dims(a_event), s.g.dims(v_event)));
    }
    let at = s.g.transpose(a_event)?;
    let vt = s.g.transpose(v_event)?;
    let sum = s.g.add(vt, at)?;
    s.g.scale(sum, 0.5)
}

/// One GRU step. x_proj already holds `x W + b` for this step (B x 3h).
fn gru_cell(s: &mut Session, x_proj: Var, h: Var, u_rz: Var, u_n: Var, hidden: usize) -> Result<Var> {
    let xr = s.g.slice(x_proj, 1, 0, hidden)?;
    let xz = s.g.slice(x_proj, 1, hidden, hidden)?;
    let xn = s.g.slice(x_proj, 1, 2 * hidden, hidden)?;
    let hrz = s.g.matmul(h, u_rz)?;
    let hr = s.g.slice(hrz, 1, 0, hidden)?;
    let hz = s.g.slice(hrz, 1, hidden, hidden)?;
    let r = s.g.add(xr, hr)?;
    let r = s.g.sigmoid(r)?;
    let z = s.g.add(xz, hz)?;
    let z = s.g.sigmoid(z)?;
    let rh = s.g.mul(r, h)?;
    let hn = s.g.matmul(rh, u_n)?;
    let n = s.g.add(xn, hn)?;
    let n = s.g.tanh(n)?;
    // h' = z*h + (1 - z)*n = n + z*(h - n)
    let diff = s.g.sub(h, n)?;
    let gated = s.g.mul(z, diff)?;
    s.g.add(n, gated)
}

fn gru_direction(s: &mut Session, x: Var, h0: Var, p: &GruParams, reverse: bool) -> Result<Vec<Var>> {
    let t = s.g.dims(x)[1];
    let (w_ih, u_rz, u_n, b) = (s.p(p.w_ih), s.p(p.u_rz), s.p(p.u_n), s.p(p.b));
    let xp = s.g.affine(x, w_ih, b)?;
    let mut h = h0;
    let mut out = vec![h0; t];
    let order: Vec<usize> = if reverse { (0..t).rev().collect() } else { (0..t).collect() };
    for step in order {
        let xt = s.g.select(xp, 1, step)?;
        h = gru_cell(s, xt, h, u_rz, u_n, p.hidden)?;
        out[step] = h;
    }
    Ok(out)
}

/// Bidirectional GRU over B x T x d_in with explicit initial states (B x h each).
pub fn bigru(s: &mut Session, x: Var, h_fwd: Var, h_bwd: Var, p: &BiGruParams) -> Result<Var> {
    let f = gru_direction(s, x, h_fwd, &p.fwd, false)?;
    let b = gru_direction(s, x, h_bwd, &p.bwd, true)?;
    let f = s.g.stack(&f, 1)?;
    let b = s.g.stack(&b, 1)?;
    s.g.concat(&[f, b], 2)
}

/// Event-initialized GRUs per modality. `av_event` (B x L x d_e) seeds the
/// forward direction with its first row and the backward direction with its
/// last; `None` starts both from zeros.
pub fn isce(s: &mut Session, a_seg: Var, v_seg: Var, av_event: Option<Var>, p: &IsceParams) -> Result<(Var, Var)> {
    let d = s.g.dims(a_seg).to_vec();
    if d.len() != 3 || s.g.dims(v_seg) != d.as_slice() {
        return dim_err(format!("isce: audio {d:?}, visual {:?}", s.g.dims(v_seg)));
    }
    let hidden = p.gru_a.fwd.hidden;
    let (h_fwd, h_bwd) = match av_event {
        Some(ev) => {
            let ed = s.g.dims(ev).to_vec();
            if ed.len() != 3 || ed[0] != d[0] || ed[2] != hidden {
                return dim_err(format!("isce: event representation {ed:?}, hidden {hidden}"));
            }
            (s.g.select(ev, 1, 0)?, s.g.select(ev, 1, ed[1] - 1)?)
        }
        None => {
            let z = s.g.constant(Tensor::zeros(vec![d[0], hidden])?);
            (z, z)
        }
    };
    let a = bigru(s, a_seg, h_fwd, h_bwd, &p.gru_a)?;
    let v = bigru(s, v_seg, h_fwd, h_bwd, &p.gru_v)?;
    Ok((a, v))
}

/// `0.5 * (LN_a(dropout(relu(a W_a))) + LN_v(dropout(relu(v W_v))))`
pub fn project_fuse(s: &mut Session, a: Var, v: Var, p: &FuseParams, rate: f64) -> Result<Var> {
    let (w_a, w_v) = (s.p(p.w_a), s.p(p.w_v));
    let fa = s.g.linear(a, w_a)?;
    let fa = s.g.relu(fa)?;
    let fa = s.dropout(fa, rate)?;
    let fv = s.g.linear(v, w_v)?;
    let fv = s.g.relu(fv)?;
    let fv = s.dropout(fv, rate)?;
    let la = p.ln_a.forward(s, fa)?;
    let lv = p.ln_v.forward(s, fv)?;
    let sum = s.g.add(la, lv)?;
    s.g.scale(sum, 0.5)
}
