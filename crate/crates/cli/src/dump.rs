use std::fmt::Write as _;
use std::fs;

use vscg_core::config::Mode;
use vscg_core::datapack::{Batch, FeatureSample, Manifest};
use vscg_core::nn::Session;
use vscg_core::pipeline::{load_checkpoint, HeadOutput};
use vscg_core::{Error, Result};

use crate::DumpArgs;

/// Binary portable graymap, scaled so the largest cell is 255.
pub fn pgm(values: &[f64], h: usize, w: usize) -> Vec<u8> {
    let max = values.iter().copied().fold(0.0, f64::max);
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend(values.iter().map(|&v| if max > 0.0 { (v / max * 255.0).round() as u8 } else { 0 }));
    out
}

fn find_sample(manifest: &Manifest, id: &str) -> Result<FeatureSample> {
    for split in &manifest.splits {
        let (_, samples) = manifest.load_split(&split.name)?;
        if let Some(s) = samples.into_iter().find(|s| s.id == id) {
            return Ok(s);
        }
    }
    Err(Error::Config(format!("no sample with id `{id}` in any split")))
}

pub fn dump_attention(a: &DumpArgs) -> Result<()> {
    let ck = load_checkpoint(&a.ckpt)?;
    if ck.cfg.mode != Mode::Fully {
        return Err(Error::Config("dump-attention needs a fully-supervised checkpoint".into()));
    }
    let manifest = Manifest::load(&a.data)?;
    let sample = find_sample(&manifest, &a.sample)?;
    let model = ck.best_model()?;
    let d = model.cfg.dims;
    let batch = Batch::stack(&[&sample], model.cfg.background_index)?;

    let mut s = Session::eval(&model.store);
    let out = model.forward(&mut s, &batch)?;
    let pred = model.decode(&s, &out)?.remove(0);
    let HeadOutput::Fully(head) = &out.head else {
        return Err(Error::Config("checkpoint head is not fully supervised".into()));
    };
    let alpha = s.g.value(out.encoder.alpha).data();
    let o_t = s.g.value(head.o_t).data();
    let sim = s.g.value(head.s).data();
    let cells = d.h * d.w;

    fs::create_dir_all(&a.out)?;
    let mut alpha_csv = String::from("segment");
    for k in 0..cells {
        let _ = write!(alpha_csv, ",a{}_{}", k / d.w, k % d.w);
    }
    alpha_csv.push('\n');
    let mut trace = String::from("segment,o_t,s,pred,truth\n");
    for t in 0..d.t {
        let row = &alpha[t * cells..(t + 1) * cells];
        fs::write(a.out.join(format!("attention_{t:02}.pgm")), pgm(row, d.h, d.w))?;
        let vals: Vec<String> = row.iter().map(f64::to_string).collect();
        let _ = writeln!(alpha_csv, "{t},{}", vals.join(","));
        let truth = sample.label_row(t).iter().position(|&b| b == 1).unwrap_or(model.cfg.background_index);
        let _ = writeln!(trace, "{t},{},{},{},{truth}", o_t[t], sim[t], pred[t]);
    }
    fs::write(a.out.join("alpha.csv"), alpha_csv)?;
    fs::write(a.out.join("trace.csv"), trace)?;
    println!("wrote {} maps to {}", d.t, a.out.display());
    Ok(())
}
