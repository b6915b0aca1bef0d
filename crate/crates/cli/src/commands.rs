use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use vscg_core::config::{AblationName, Mode, ModelConfig};
use vscg_core::datapack::{synth_dataset_with, write_pack, Manifest, SampleDims, SplitEntry, SynthOptions};
use vscg_core::pipeline::{
    ablation_matrix, evaluate, gradcheck_model, load_checkpoint, loss_matrix, save_checkpoint, table2, table3, to_csv,
    build_model, EpochRecord, Trainer, GRADCHECK_TOL,
};
use vscg_core::{Error, Result};

use crate::{AblationArgs, ConfigArgs, EvalArgs, GradcheckArgs, ParamsArgs, SynthArgs, TrainArgs};

/// Parameter-count ceiling for `gradcheck`; each element costs two forward passes.
const GRADCHECK_MAX_ELEMENTS: usize = 20_000;

pub fn resolve_config(a: &ConfigArgs) -> Result<ModelConfig> {
    let mut cfg = a.preset.config();
    if let Some(path) = &a.config {
        cfg = ModelConfig::from_text(cfg, &fs::read_to_string(path)?)?;
    }
    if let Some(seed) = a.seed {
        cfg.train.seed = seed;
    }
    Ok(cfg)
}

pub fn manifest_path(pack: &Path) -> PathBuf {
    let stem = pack.file_stem().and_then(|s| s.to_str()).unwrap_or("pack");
    pack.with_file_name(format!("{stem}.manifest.json"))
}

pub fn synth(a: &SynthArgs) -> Result<()> {
    let cfg = a.preset.config();
    let samples = synth_dataset_with(&cfg, a.n, a.seed, &SynthOptions { sigma: a.sigma })?;
    let dims = SampleDims::from_config(&cfg);
    write_pack(&samples, &dims, &a.out)?;

    let n_train = a.n * 8 / 10;
    let n_val = a.n / 10;
    let file = a
        .out
        .file_name()
        .and_then(|f| f.to_str())
        .ok_or_else(|| Error::Config(format!("bad output path {}", a.out.display())))?
        .to_string();
    let entry = |name: &str, start, end| SplitEntry {
        name: name.into(),
        path: file.clone(),
        start: Some(start),
        end: Some(end),
    };
    let mut manifest = Manifest::new(vec![
        entry("train", 0, n_train),
        entry("val", n_train, n_train + n_val),
        entry("test", n_train + n_val, a.n),
    ]);
    manifest.metadata.insert("seed".into(), a.seed.into());
    manifest.metadata.insert("n".into(), a.n.into());
    manifest.metadata.insert("sigma".into(), a.sigma.into());
    manifest.save(manifest_path(&a.out))?;

    println!(
        "dims t={} c={} d_a={} d_v={} h={} w={} background={}",
        dims.t, dims.c, dims.d_a, dims.d_v, dims.h, dims.w, dims.background_index
    );
    let mut hist = vec![0usize; dims.c];
    for s in &samples {
        for t in 0..s.t() {
            if let Some(k) = s.label_row(t).iter().position(|&b| b == 1) {
                hist[k] += 1;
            }
        }
    }
    let hist: Vec<String> = hist.iter().enumerate().map(|(k, n)| format!("{k}:{n}")).collect();
    println!("segments per class {}", hist.join(" "));
    println!("splits train={n_train} val={n_val} test={}", a.n - n_train - n_val);
    Ok(())
}

fn history_csv(history: &[EpochRecord]) -> String {
    let mut out = String::from("epoch,train_loss,val_acc\n");
    for r in history {
        let _ = writeln!(out, "{},{},{}", r.epoch, r.train_loss, r.val_acc);
    }
    out
}

pub fn train(a: &TrainArgs) -> Result<()> {
    let mut cfg = resolve_config(&a.cfg)?;
    if let Some(m) = a.mode {
        cfg.mode = m;
    }
    if let Some(ab) = a.ablation {
        cfg.ablation = ab.ablation();
    }
    if let Some(v) = a.variant {
        cfg.variant = v;
    }
    if let Some(e) = a.epochs {
        cfg.train.epochs = e;
    }
    cfg.validate()?;

    let manifest = Manifest::load(&a.data)?;
    let (train_header, train_set) = manifest.load_split("train")?;
    let (_, val_set) = manifest.load_split("val")?;
    train_header.dims.check_config(&cfg)?;

    let mut trainer = match &a.resume {
        Some(path) => {
            let ck = load_checkpoint(path)?;
            ck.check_against(&cfg)?;
            let mut t = ck.trainer;
            t.model.cfg.train.epochs = cfg.train.epochs;
            t.model.cfg.train.patience = cfg.train.patience;
            t
        }
        None => Trainer::new(build_model(&cfg)?),
    };
    trainer.run(&train_set, &val_set)?;
    save_checkpoint(&trainer, &a.out)?;
    fs::write(a.out.with_file_name("history.csv"), history_csv(&trainer.history))?;
    println!("best_epoch={} epochs_run={}", trainer.best_epoch, trainer.epoch);
    println!("val_acc={}", trainer.best_val);
    Ok(())
}

pub fn eval(a: &EvalArgs) -> Result<()> {
    let ck = load_checkpoint(&a.ckpt)?;
    let manifest = Manifest::load(&a.data)?;
    let (header, samples) = manifest.load_split(&a.split)?;
    header.dims.check_config(&ck.cfg)?;
    let model = ck.best_model()?;
    let report = evaluate(&model, &samples, ck.cfg.mode)?;

    let path = a.confusion.clone().unwrap_or_else(|| {
        let stem = a.ckpt.file_stem().and_then(|s| s.to_str()).unwrap_or("model");
        a.ckpt.with_file_name(format!("{stem}.{}.confusion.csv", a.split))
    });
    let c = report.confusion.len();
    let mut csv = String::from("true\\pred");
    for k in 0..c {
        let _ = write!(csv, ",{k}");
    }
    csv.push('\n');
    for (k, row) in report.confusion.iter().enumerate() {
        let cells: Vec<String> = row.iter().map(u64::to_string).collect();
        let _ = writeln!(csv, "{k},{}", cells.join(","));
    }
    fs::write(&path, csv)?;
    println!("segments={}", report.segments);
    println!("acc={}", report.accuracy);
    Ok(())
}

pub fn gradcheck(a: &GradcheckArgs) -> ExitCode {
    match run_gradcheck(a) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(4),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}

fn run_gradcheck(a: &GradcheckArgs) -> Result<bool> {
    if a.with_dropout {
        return Err(Error::Config(
            "dropout makes the loss nondeterministic; finite differences need it off".into(),
        ));
    }
    let mut base = ModelConfig::tiny();
    if let Some(path) = &a.config {
        base = ModelConfig::from_text(base, &fs::read_to_string(path)?)?;
    }
    let mut worst: Option<(f64, String)> = None;
    for mode in [Mode::Fully, Mode::Weakly] {
        let mut cfg = base;
        cfg.mode = mode;
        cfg.variant = vscg_core::config::LossVariant::Full;
        cfg.validate()?;
        let elements = build_model(&cfg)?.num_params();
        if elements > GRADCHECK_MAX_ELEMENTS {
            return Err(Error::Config(format!(
                "{elements} parameters exceed the gradcheck cap of {GRADCHECK_MAX_ELEMENTS}; use tiny dims"
            )));
        }
        let report = gradcheck_model(&cfg, a.n, a.seed, a.step, a.inject_fault)?;
        println!("mode {mode}");
        for m in &report {
            println!(
                "  {:<16} max_rel_err={:.3e} over_tol={}/{} worst={}[{}] analytic={:e} numeric={:e}",
                m.module, m.max_rel_err, m.failing, m.elements, m.worst_param, m.worst_index, m.analytic, m.numeric
            );
            if worst.as_ref().is_none_or(|(e, _)| m.max_rel_err > *e) {
                worst = Some((m.max_rel_err, format!("{mode} {}[{}]", m.worst_param, m.worst_index)));
            }
        }
    }
    let (err, name) = worst.unwrap_or((0.0, String::new()));
    if err < GRADCHECK_TOL {
        println!("gradcheck passed: max_rel_err={err:.3e} < {GRADCHECK_TOL:e}");
        Ok(true)
    } else {
        println!("gradcheck FAILED: max_rel_err={err:.3e} at {name}");
        eprintln!("gradient check failed at {name} (relative error {err:.3e})");
        Ok(false)
    }
}

pub fn ablation(a: &AblationArgs) -> Result<()> {
    let mut cfg = resolve_config(&a.cfg)?;
    if let Some(e) = a.epochs {
        cfg.train.epochs = e;
    }
    let manifest = Manifest::load(&a.data)?;
    let (header, train_set) = manifest.load_split("train")?;
    let (_, val_set) = manifest.load_split("val")?;
    header.dims.check_config(&cfg)?;
    let seeds: Vec<u64> = (0..a.seeds).map(|k| cfg.train.seed + k).collect();

    let mut runs = ablation_matrix(
        &cfg,
        &AblationName::ALL,
        &[Mode::Fully, Mode::Weakly],
        &seeds,
        &train_set,
        &val_set,
    )?;
    let t2 = table2(&runs);
    println!("{t2}");
    fs::create_dir_all(&a.out)?;
    fs::write(a.out.join("table2.txt"), &t2)?;
    if !a.skip_losses {
        let losses = loss_matrix(&cfg, &seeds, &train_set, &val_set)?;
        let t3 = table3(&losses);
        println!("{t3}");
        fs::write(a.out.join("table3.txt"), &t3)?;
        runs.extend(losses);
    }
    fs::write(a.out.join("runs.csv"), to_csv(&runs))?;
    Ok(())
}

pub fn params(a: &ParamsArgs) -> Result<()> {
    let mut cfg = resolve_config(&a.cfg)?;
    if let Some(m) = a.mode {
        cfg.mode = m;
    }
    if let Some(ab) = a.ablation {
        cfg.ablation = ab.ablation();
    }
    let model = build_model(&cfg)?;
    for (name, dims, n) in model.param_listing() {
        println!("{name} {dims:?} {n}");
    }
    println!("total {}", model.num_params());
    Ok(())
}
