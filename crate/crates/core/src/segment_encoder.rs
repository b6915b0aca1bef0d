//! Segment-level encoding: audio-guided visual attention, a single-layer
//! Bi-LSTM per modality, positive sample propagation and the
//! project-and-norm blocks producing `a_seg`, `v_seg`.

use crate::config::ModelConfig;
use crate::error::{dim_err, Result};
use crate::nn::{Init, LayerNormParams, Linear, Session};
use crate::numkit::{ParamId, Var, ZeroSlice};

/// Additive attention over the H*W visual positions of each segment.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AgvaParams {
    /// d_a x d_m
    pub u_a: ParamId,
    /// d_v x d_m
    pub u_v: ParamId,
    /// d_m x 1
    pub w_att: ParamId,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LstmParams {
    /// d_in x 4h, gate order (input, forget, cell, output)
    pub w_ih: ParamId,
    /// h x 4h
    pub w_hh: ParamId,
    /// 4h
    pub b: ParamId,
    pub hidden: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BiLstmParams {
    pub fwd: LstmParams,
    pub bwd: LstmParams,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PspParams {
    /// d_l x d_p
    pub w_a: ParamId,
    /// d_l x d_p
    pub w_v: ParamId,
    pub agg_a: Linear,
    pub agg_v: Linear,
}

/// `layer_norm(dropout(relu(x W + b)))`
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ProjectNormParams {
    pub proj: Linear,
    pub norm: LayerNormParams,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EncoderParams {
    pub agva: AgvaParams,
    pub lstm_a: BiLstmParams,
    pub lstm_v: BiLstmParams,
    pub psp: PspParams,
    pub pn_a: ProjectNormParams,
    pub pn_v: ProjectNormParams,
}

impl LstmParams {
    pub fn init(init: &mut Init, name: &str, d_in: usize, hidden: usize) -> Result<Self> {
        Ok(LstmParams {
            w_ih: init.uniform(&format!("{name}.w_ih"), &[d_in, 4 * hidden], hidden)?,
            w_hh: init.uniform(&format!("{name}.w_hh"), &[hidden, 4 * hidden], hidden)?,
            b: init.zeros(&format!("{name}.b"), &[4 * hidden])?,
            hidden,
        })
    }
}

impl BiLstmParams {
    pub fn init(init: &mut Init, name: &str, d_in: usize, hidden: usize) -> Result<Self> {
        Ok(BiLstmParams {
            fwd: LstmParams::init(init, &format!("{name}.fwd"), d_in, hidden)?,
            bwd: LstmParams::init(init, &format!("{name}.bwd"), d_in, hidden)?,
        })
    }
}

impl ProjectNormParams {
    pub fn init(init: &mut Init, name: &str, d_in: usize, d_out: usize) -> Result<Self> {
        Ok(ProjectNormParams {
            proj: Linear::init(init, &format!("{name}.proj"), d_in, d_out)?,
            norm: LayerNormParams::init(init, &format!("{name}.norm"), d_out)?,
        })
    }
}

impl EncoderParams {
    pub fn init(init: &mut Init, cfg: &ModelConfig) -> Result<Self> {
        let d = &cfg.dims;
        let half = d.d_l / 2;
        Ok(EncoderParams {
            agva: AgvaParams {
                u_a: init.uniform("encoder.agva.u_a", &[d.d_a, d.d_m], d.d_a)?,
                u_v: init.uniform("encoder.agva.u_v", &[d.d_v, d.d_m], d.d_v)?,
                w_att: init.uniform("encoder.agva.w_att", &[d.d_m, 1], d.d_m)?,
            },
            lstm_a: BiLstmParams::init(init, "encoder.lstm_a", d.d_a, half)?,
            lstm_v: BiLstmParams::init(init, "encoder.lstm_v", d.d_v, half)?,
            psp: PspParams {
                w_a: init.uniform("encoder.psp.w_a", &[d.d_l, d.d_p], d.d_l)?,
                w_v: init.uniform("encoder.psp.w_v", &[d.d_l, d.d_p], d.d_l)?,
                agg_a: Linear::init(init, "encoder.psp.agg_a", d.d_l, d.d_s)?,
                agg_v: Linear::init(init, "encoder.psp.agg_v", d.d_l, d.d_s)?,
            },
            pn_a: ProjectNormParams::init(init, "encoder.pn_a", d.d_s, d.d_s)?,
            pn_v: ProjectNormParams::init(init, "encoder.pn_v", d.d_s, d.d_s)?,
        })
    }
}

/// visual: B x T x H x W x d_v, audio: B x T x d_a.
/// Returns the attended visual features (B x T x d_v) and the attention
/// weights (B x T x H*W).
pub fn agva(s: &mut Session, visual: Var, audio: Var, p: &AgvaParams) -> Result<(Var, Var)> {
    let vd = s.g.dims(visual).to_vec();
    let ad = s.g.dims(audio).to_vec();
    if vd.len() != 5 || ad.len() != 3 || vd[..2] != ad[..2] {
        return dim_err(format!("agva: visual {vd:?}, audio {ad:?}"));
    }
    let (b, t, cells, d_v) = (vd[0], vd[1], vd[2] * vd[3], vd[4]);
    let d_m = s.store.value(p.u_v).dims()[1];
    let (u_a, u_v, w_att) = (s.p(p.u_a), s.p(p.u_v), s.p(p.w_att));
    let v_flat = s.g.reshape(visual, vec![b * t, cells, d_v])?;
    let pv = s.g.linear(v_flat, u_v)?;
    let pa = s.g.linear(audio, u_a)?;
    let pa = s.g.reshape(pa, vec![b * t, 1, d_m])?;
    let pa = s.g.broadcast_to(pa, vec![b * t, cells, d_m])?;
    let pre = s.g.add(pv, pa)?;
    let act = s.g.tanh(pre)?;
    let e = s.g.linear(act, w_att)?;
    let e = s.g.reshape(e, vec![b * t, cells])?;
    let alpha = s.g.softmax(e, 1)?;
    let alpha3 = s.g.reshape(alpha, vec![b * t, 1, cells])?;
    let out = s.g.bmm(alpha3, v_flat)?;
    let out = s.g.reshape(out, vec![b, t, d_v])?;
    let alpha = s.g.reshape(alpha, vec![b, t, cells])?;
    Ok((out, alpha))
}

fn lstm_direction(s: &mut Session, x: Var, p: &LstmParams, reverse: bool) -> Result<Vec<Var>> {
    let dims = s.g.dims(x).to_vec();
    let (b, t) = (dims[0], dims[1]);
    let h = p.hidden;
    let (w_ih, w_hh, bias) = (s.p(p.w_ih), s.p(p.w_hh), s.p(p.b));
    let xw = s.g.affine(x, w_ih, bias)?;
    let zeros = crate::numkit::Tensor::zeros(vec![b, h])?;
    let mut hs = s.g.constant(zeros.clone());
    let mut cs = s.g.constant(zeros);
    let mut out = vec![hs; t];
    let steps: Vec<usize> = if reverse { (0..t).rev().collect() } else { (0..t).collect() };
    for step in steps {
        let xt = s.g.select(xw, 1, step)?;
        let rec = s.g.matmul(hs, w_hh)?;
        let gates = s.g.add(xt, rec)?;
        let i = s.g.slice(gates, 1, 0, h)?;
        let f = s.g.slice(gates, 1, h, h)?;
        let c_in = s.g.slice(gates, 1, 2 * h, h)?;
        let o = s.g.slice(gates, 1, 3 * h, h)?;
        let i = s.g.sigmoid(i)?;
        let f = s.g.sigmoid(f)?;
        let c_in = s.g.tanh(c_in)?;
        let o = s.g.sigmoid(o)?;
        let keep = s.g.mul(f, cs)?;
        let write = s.g.mul(i, c_in)?;
        cs = s.g.add(keep, write)?;
        let tc = s.g.tanh(cs)?;
        hs = s.g.mul(o, tc)?;
        out[step] = hs;
    }
    Ok(out)
}

/// Single-layer bidirectional LSTM with zero initial states.
/// x: B x T x d_in -> B x T x 2h (forward then backward features).
pub fn bilstm_encode(s: &mut Session, x: Var, p: &BiLstmParams) -> Result<Var> {
    let d = s.g.dims(x).to_vec();
    if d.len() != 3 {
        return dim_err(format!("bilstm_encode: expected B x T x d, got {d:?}"));
    }
    let fwd = lstm_direction(s, x, &p.fwd, false)?;
    let bwd = lstm_direction(s, x, &p.bwd, true)?;
    let f = s.g.stack(&fwd, 1)?;
    let b = s.g.stack(&bwd, 1)?;
    s.g.concat(&[f, b], 2)
}

/// Outputs of [`psp`]; the normalized similarity maps are kept for inspection.
pub struct PspOutput {
    pub a: Var,
    pub v: Var,
    /// B x T x T, rows index audio segments.
    pub beta_audio: Var,
    /// B x T x T, rows index visual segments.
    pub beta_visual: Var,
}

/// Positive sample propagation: scaled dot-product similarity, relu,
/// thresholding at `tau`, row-wise l1 normalization (all-zero rows stay zero),
/// cross-modal aggregation with a residual, then `relu(linear(.))`.
pub fn psp(s: &mut Session, a: Var, v: Var, p: &PspParams, tau: f64) -> Result<PspOutput> {
    let (da, dv) = (s.g.dims(a).to_vec(), s.g.dims(v).to_vec());
    if da.len() != 3 || da != dv {
        return dim_err(format!("psp: audio {da:?}, visual {dv:?}"));
    }
    let (w_a, w_v) = (s.p(p.w_a), s.p(p.w_v));
    let pa = s.g.linear(a, w_a)?;
    let pv = s.g.linear(v, w_v)?;
    let d_p = s.g.dims(pa)[2];
    let pv_t = s.g.transpose(pv)?;
    let beta = s.g.bmm(pa, pv_t)?;
    let beta = s.g.scale(beta, 1.0 / (d_p as f64).sqrt())?;
    let beta = s.g.relu(beta)?;
    let beta = s.g.mask_below(beta, tau)?;
    let beta_audio = s.g.l1_normalize(beta, 2, ZeroSlice::Keep)?;
    let beta_t = s.g.transpose(beta)?;
    let beta_visual = s.g.l1_normalize(beta_t, 2, ZeroSlice::Keep)?;
    let v_ctx = s.g.bmm(beta_audio, v)?;
    let a_ctx = s.g.bmm(beta_visual, a)?;
    let a_res = s.g.add(a, v_ctx)?;
    let v_res = s.g.add(v, a_ctx)?;
    let a_out = p.agg_a.forward(s, a_res)?;
    let a_out = s.g.relu(a_out)?;
    let v_out = p.agg_v.forward(s, v_res)?;
    let v_out = s.g.relu(v_out)?;
    Ok(PspOutput {
        a: a_out,
        v: v_out,
        beta_audio,
        beta_visual,
    })
}

/// `layer_norm(dropout(relu(x W + b), rate))`
pub fn project_norm(s: &mut Session, x: Var, p: &ProjectNormParams, rate: f64) -> Result<Var> {
    let y = p.proj.forward(s, x)?;
    let y = s.g.relu(y)?;
    let y = s.dropout(y, rate)?;
    p.norm.forward(s, y)
}

/// Everything the encoder produces for one batch.
pub struct EncoderOutput {
    pub alpha: Var,
    pub a_lstm: Var,
    pub v_lstm: Var,
    pub psp: PspOutput,
    pub a_seg: Var,
    pub v_seg: Var,
}

pub fn encode(s: &mut Session, visual: Var, audio: Var, p: &EncoderParams, cfg: &ModelConfig) -> Result<EncoderOutput> {
    let (v_att, alpha) = agva(s, visual, audio, &p.agva)?;
    let a_lstm = bilstm_encode(s, audio, &p.lstm_a)?;
    let v_lstm = bilstm_encode(s, v_att, &p.lstm_v)?;
    let psp_out = psp(s, a_lstm, v_lstm, &p.psp, cfg.tau_psp)?;
    let a_seg = project_norm(s, psp_out.a, &p.pn_a, cfg.r_s)?;
    let v_seg = project_norm(s, psp_out.v, &p.pn_v, cfg.r_s)?;
    Ok(EncoderOutput {
        alpha,
        a_lstm,
        v_lstm,
        psp: psp_out,
        a_seg,
        v_seg,
    })
}
