use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::{CereMode, Mode, ModelConfig};
use crate::datapack::{foreground_classes, Batch};
use crate::error::{Error, Result};
use crate::escm::{cere, fuse_event, isce, project_fuse, CereParams, FuseParams, IsceParams};
use crate::heads::{
    fully_forward, infer_fully, infer_weak, loss_fully, loss_weak, weak_forward, FullyHeadParams, FullyOutput,
    FullyTargets, WeakHeadParams, WeakOutput,
};
use crate::nn::{Init, Session};
use crate::numkit::{ParamStore, Var};
use crate::segment_encoder::{encode, EncoderOutput, EncoderParams};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CereSet {
    Shared(CereParams),
    Split { audio: CereParams, visual: CereParams },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EscmParams {
    pub cere: Option<CereSet>,
    pub isce: IsceParams,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum HeadParams {
    Fully(FullyHeadParams),
    Weak(WeakHeadParams),
}

/// Parameters plus the wiring that uses them.
#[derive(Clone, Debug)]
pub struct Model {
    pub cfg: ModelConfig,
    pub store: ParamStore,
    pub encoder: EncoderParams,
    pub escm: Option<EscmParams>,
    pub fuse: FuseParams,
    pub head: HeadParams,
}

pub enum HeadOutput {
    Fully(FullyOutput),
    Weak(WeakOutput),
}

pub struct ForwardOutput {
    pub encoder: EncoderOutput,
    pub a_event: Option<Var>,
    pub v_event: Option<Var>,
    pub av_event: Option<Var>,
    /// ISCE outputs, or the segment features when the ESCM block is removed.
    pub a_temporal: Var,
    pub v_temporal: Var,
    pub f_av: Var,
    pub head: HeadOutput,
}

/// Initialize every parameter from `cfg.train.seed`.
pub fn build_model(cfg: &ModelConfig) -> Result<Model> {
    cfg.validate()?;
    let d = cfg.dims;
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.train.seed);
    let mut init = Init {
        store: &mut store,
        rng: &mut rng,
    };
    let encoder = EncoderParams::init(&mut init, cfg)?;
    let escm = if cfg.ablation.escm {
        let cere = match cfg.ablation.cere {
            CereMode::ZeroInit => None,
            CereMode::On if cfg.ablation.shared_cere => {
                Some(CereSet::Shared(CereParams::init(&mut init, "escm.cere", d.d_s, d.d_e, cfg.cere_kernel())?))
            }
            CereMode::On => {
                let audio = CereParams::init(&mut init, "escm.cere_a", d.d_s, d.d_e, cfg.cere_kernel())?;
                let visual = CereParams::init(&mut init, "escm.cere_v", d.d_s, d.d_e, cfg.cere_kernel())?;
                // Independent storage, identical starting values.
                for (src, dst) in audio.ids().into_iter().zip(visual.ids()) {
                    let v = init.store.value(src).clone();
                    init.store.set_value(dst, v)?;
                }
                Some(CereSet::Split { audio, visual })
            }
        };
        Some(EscmParams {
            cere,
            isce: IsceParams::init(&mut init, cfg)?,
        })
    } else {
        None
    };
    let fuse_in = if cfg.ablation.escm { d.d_i } else { d.d_s };
    let fuse = FuseParams::init(&mut init, fuse_in, d.d_f)?;
    let head = match cfg.mode {
        Mode::Fully => HeadParams::Fully(FullyHeadParams::init(&mut init, d.d_f, d.c)?),
        Mode::Weakly => HeadParams::Weak(WeakHeadParams::init(&mut init, d.d_f, d.d_h, d.c)?),
    };
    Ok(Model {
        cfg: *cfg,
        store,
        encoder,
        escm,
        fuse,
        head,
    })
}

impl Model {
    pub fn forward(&self, s: &mut Session, batch: &Batch) -> Result<ForwardOutput> {
        let cfg = &self.cfg;
        let visual = s.g.constant(batch.visual.clone());
        let audio = s.g.constant(batch.audio.clone());
        let enc = encode(s, visual, audio, &self.encoder, cfg)?;
        let (mut a_event, mut v_event, mut av_event) = (None, None, None);
        let (a_t, v_t) = match &self.escm {
            Some(e) => {
                if let Some(set) = &e.cere {
                    let (pa, pv) = match set {
                        CereSet::Shared(p) => (p, p),
                        CereSet::Split { audio, visual } => (audio, visual),
                    };
                    let ae = cere(s, enc.a_seg, pa)?;
                    let ve = cere(s, enc.v_seg, pv)?;
                    av_event = Some(fuse_event(s, ae, ve)?);
                    a_event = Some(ae);
                    v_event = Some(ve);
                }
                isce(s, enc.a_seg, enc.v_seg, av_event, &e.isce)?
            }
            None => (enc.a_seg, enc.v_seg),
        };
        let f_av = project_fuse(s, a_t, v_t, &self.fuse, cfg.r_i())?;
        let head = match &self.head {
            HeadParams::Fully(p) => HeadOutput::Fully(fully_forward(s, f_av, a_t, v_t, p)?),
            HeadParams::Weak(p) => HeadOutput::Weak(weak_forward(s, f_av, p)?),
        };
        Ok(ForwardOutput {
            encoder: enc,
            a_event,
            v_event,
            av_event,
            a_temporal: a_t,
            v_temporal: v_t,
            f_av,
            head,
        })
    }

    /// Scalar objective for the configured mode and loss variant.
    pub fn loss(&self, s: &mut Session, out: &ForwardOutput, batch: &Batch) -> Result<Var> {
        match &out.head {
            HeadOutput::Fully(o) => {
                let targets = FullyTargets::new(&batch.labels)?;
                Ok(loss_fully(s, o, &targets, self.cfg.variant, self.cfg.lambda_avps)?.total)
            }
            HeadOutput::Weak(o) => loss_weak(s, o.o_w, &batch.video_labels, self.cfg.lambda, self.cfg.variant),
        }
    }

    /// Segment labels for every video of the batch, eval mode.
    pub fn predict(&self, batch: &Batch) -> Result<Vec<Vec<usize>>> {
        let mut s = Session::eval(&self.store);
        let out = self.forward(&mut s, batch)?;
        self.decode(&s, &out)
    }

    pub fn decode(&self, s: &Session, out: &ForwardOutput) -> Result<Vec<Vec<usize>>> {
        let d = &self.cfg.dims;
        match &out.head {
            HeadOutput::Fully(o) => {
                let fg = foreground_classes(d.c, self.cfg.background_index);
                let o_t = s.g.value(o.o_t).data();
                let o_c = s.g.value(o.o_c).data();
                Ok(o_t
                    .chunks(d.t)
                    .zip(o_c.chunks(d.c - 1))
                    .map(|(t, c)| infer_fully(t, c, self.cfg.tau_b, &fg, self.cfg.background_index))
                    .collect())
            }
            HeadOutput::Weak(o) => Ok(s
                .g
                .value(o.f_h)
                .data()
                .chunks(d.t * d.c)
                .map(|v| infer_weak(v, d.c))
                .collect()),
        }
    }

    /// Named parameter listing: `(name, dims, elements)`.
    pub fn param_listing(&self) -> Vec<(String, Vec<usize>, usize)> {
        self.store
            .iter()
            .map(|(_, p)| (p.name.clone(), p.value.dims().to_vec(), p.value.numel()))
            .collect()
    }

    pub fn num_params(&self) -> usize {
        self.store.total_elements()
    }

    /// Copy parameter values by name from `other`, checking shapes.
    pub fn load_values(&mut self, other: &ParamStore) -> Result<()> {
        if other.len() != self.store.len() {
            return Err(Error::Mismatch {
                field: "parameter count".into(),
                found: other.len().to_string(),
                expected: self.store.len().to_string(),
            });
        }
        let ids: Vec<_> = self.store.ids().collect();
        for id in ids {
            let name = self.store.get(id).name.clone();
            let src = other.find(&name).ok_or_else(|| Error::Mismatch {
                field: name.clone(),
                found: "missing".into(),
                expected: "present".into(),
            })?;
            self.store.set_value(id, other.value(src).clone())?;
        }
        Ok(())
    }
}
