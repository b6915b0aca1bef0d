use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::model::build_model;
use crate::config::ModelConfig;
use crate::datapack::{synth_dataset, Batch, FeatureSample};
use crate::error::Result;
use crate::nn::{jitter_zeros, Session};
use crate::numkit::{check_gradients, Graph, ParamId};

/// Pass threshold for the whole-model check.
pub const GRADCHECK_TOL: f64 = 1e-4;

/// Worst relative gradient error over the parameters of one module.
#[derive(Clone, Debug, PartialEq)]
pub struct ModuleError {
    pub module: String,
    pub params: usize,
    pub elements: usize,
    pub max_rel_err: f64,
    pub worst_param: String,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    /// Elements whose relative error exceeds [`GRADCHECK_TOL`].
    pub failing: usize,
}

fn module_of(name: &str) -> String {
    let mut parts = name.split('.');
    let first = parts.next().unwrap_or_default();
    match (first, parts.next()) {
        ("encoder" | "escm", Some(second)) => format!("{first}.{second}"),
        _ => first.to_string(),
    }
}

/// Central-difference check of the whole model (eval mode, so no dropout)
/// on `n` synthetic samples. Zero-valued parameters are jittered first so the
/// check runs at a generic point rather than on relu kinks.
pub fn gradcheck_model(cfg: &ModelConfig, n: usize, seed: u64, step: f64, inject_fault: bool) -> Result<Vec<ModuleError>> {
    let mut model = build_model(cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    jitter_zeros(&mut model.store, &mut rng, 0.1)?;
    let samples = synth_dataset(cfg, n, seed)?;
    let refs: Vec<&FeatureSample> = samples.iter().collect();
    let batch = Batch::stack(&refs, cfg.background_index)?;
    let ids: Vec<ParamId> = model.store.ids().collect();
    let mut store = model.store.clone();
    let report = check_gradients(
        |st| {
            let mut s = Session::eval(st).with_graph(Graph::new().with_fault_injection(inject_fault));
            let out = model.forward(&mut s, &batch)?;
            let l = model.loss(&mut s, &out, &batch)?;
            Ok((s.g, l))
        },
        &mut store,
        &ids,
        step,
    )?;
    model.store = store;
    let mut by_module: BTreeMap<String, ModuleError> = BTreeMap::new();
    for e in &report.entries {
        let module = module_of(&e.name);
        let numel = model.store.value(e.id).numel();
        let entry = by_module.entry(module.clone()).or_insert(ModuleError {
            module,
            params: 0,
            elements: 0,
            max_rel_err: 0.0,
            worst_param: String::new(),
            worst_index: 0,
            analytic: 0.0,
            numeric: 0.0,
            failing: 0,
        });
        entry.params += 1;
        entry.elements += numel;
        entry.failing += e.errors.iter().filter(|&&x| x > GRADCHECK_TOL).count();
        if e.max_rel_err >= entry.max_rel_err {
            entry.max_rel_err = e.max_rel_err;
            entry.worst_param = e.name.clone();
            entry.worst_index = e.worst_index;
            entry.analytic = e.analytic;
            entry.numeric = e.numeric;
        }
    }
    Ok(by_module.into_values().collect())
}
