use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use bimac::data::{synth_samples, WaldSample};
use bimac::flops::{flops_analytic, flops_instrumented, Widths, CONVENTION};
use bimac::io::{
    load_checkpoint_into, load_dataset, load_pgm, load_tensor, save_checkpoint, save_dataset,
    save_pgm,
};
use bimac::metrics::quality;
use bimac::net::{build_variant, net_forward, net_forward_cached};
use bimac::region::{analyze_image, PatchClass};
use bimac::resample::upsample_bicubic;
use bimac::train::{gradcheck_net, train as run_training, LOSS_CSV_HEADER};
use bimac::{Bi2MaNet, OpTally, Tensor};

use crate::config::RunConfig;
use crate::GradcheckFailed;

const CHECKPOINT: &str = "checkpoint.bmck";

fn out_dir(cfg: &RunConfig) -> Result<PathBuf> {
    let d = cfg.out_dir();
    fs::create_dir_all(&d).with_context(|| format!("creating {}", d.display()))?;
    Ok(d)
}

/// `(train, val)` from `data.dir`, or synthesised from the config seed.
fn datasets(cfg: &RunConfig) -> Result<(Vec<WaldSample<f64>>, Vec<WaldSample<f64>>)> {
    if let Some(dir) = cfg.data_dir() {
        let (m, train, val) =
            load_dataset(&dir).with_context(|| format!("loading dataset {}", dir.display()))?;
        if m.bands != cfg.bands {
            return Err(bimac::Error::Shape(format!(
                "dataset has {} bands, net.bands is {}",
                m.bands, cfg.bands
            ))
            .into());
        }
        return Ok((train, val));
    }
    let spec = cfg.data();
    Ok((
        synth_samples(&spec, cfg.seed, 0, cfg.count)?,
        synth_samples(&spec, cfg.seed, cfg.count, cfg.val_count)?,
    ))
}

fn load_net(cfg: &RunConfig, checkpoint: Option<PathBuf>) -> Result<Bi2MaNet<f64>> {
    let path = checkpoint.unwrap_or_else(|| cfg.out_dir().join(CHECKPOINT));
    let mut net = Bi2MaNet::zeros(cfg.net())?;
    load_checkpoint_into(&path, &mut net)
        .with_context(|| format!("loading checkpoint {}", path.display()))?;
    Ok(net)
}

pub fn train(cfg: &RunConfig) -> Result<()> {
    let tc = cfg.train();
    tc.validate()?;
    let (train_set, val_set) = datasets(cfg)?;
    let mut net: Bi2MaNet<f64> = build_variant(cfg.net(), cfg.seed)?;
    let dir = out_dir(cfg)?;
    fs::write(dir.join("config.cfg"), cfg.dump())?;
    let mut log = fs::File::create(dir.join("loss.csv"))?;
    writeln!(log, "{LOSS_CSV_HEADER}")?;
    let mut io_err = None;
    run_training(&mut net, &train_set, &val_set, &tc, |rec| {
        eprintln!(
            "epoch {:>4}  lr {:.3e}  l1 {:.6}",
            rec.epoch, rec.lr, rec.train_l1
        );
        if let Err(e) = writeln!(log, "{}", rec.csv_row()) {
            io_err.get_or_insert(e);
        }
    })?;
    if let Some(e) = io_err {
        return Err(e.into());
    }
    save_checkpoint(&dir.join(CHECKPOINT), &net)?;
    eprintln!("wrote {}", dir.join(CHECKPOINT).display());
    Ok(())
}

pub fn eval(cfg: &RunConfig, checkpoint: Option<PathBuf>, bicubic: bool, train_split: bool) -> Result<()> {
    let (train_set, val_set) = datasets(cfg)?;
    let samples = if train_split { train_set } else { val_set };
    if samples.is_empty() {
        bail!(bimac::Error::Config("no samples to evaluate".into()));
    }
    let net = if bicubic {
        None
    } else {
        Some(load_net(cfg, checkpoint)?)
    };
    let mut csv = String::from("image,sam,ergas,q2n\n");
    for (i, s) in samples.iter().enumerate() {
        let pred = match &net {
            Some(n) => net_forward(&s.pan, &s.lrms, n)?,
            None => upsample_bicubic(&s.lrms, bimac::net::RATIO)?,
        };
        let (sam, ergas, q) = quality(&pred, &s.gt)?;
        let q = q.map(|v| v.to_string()).unwrap_or_default();
        let _ = writeln!(csv, "{i},{sam},{ergas},{q}");
    }
    print!("{csv}");
    fs::write(out_dir(cfg)?.join("eval.csv"), csv)?;
    Ok(())
}

pub fn mask_dump(
    cfg: &RunConfig,
    checkpoint: Option<PathBuf>,
    sample: usize,
    layers: &[usize],
    scales: &[usize],
) -> Result<()> {
    let net = load_net(cfg, checkpoint)?;
    let (_, val) = datasets(cfg)?;
    let s = val.get(sample).ok_or_else(|| {
        bimac::Error::Index(format!("sample {sample} of {} validation samples", val.len()))
    })?;
    let (_, cache) = net_forward_cached(&net, &s.pan, &s.lrms, None, &mut OpTally::off())?;
    let masks = cache.masks();
    if let Some(&bad) = layers.iter().find(|&&l| l >= masks.len()) {
        return Err(bimac::Error::Index(format!("layer {bad} of {}", masks.len())).into());
    }
    let dir = out_dir(cfg)?.join("masks");
    fs::create_dir_all(&dir)?;
    for m in masks {
        if (!layers.is_empty() && !layers.contains(&m.layer))
            || (!scales.is_empty() && !scales.contains(&m.scale))
        {
            continue;
        }
        let stem = format!("layer{:02}_scale{}", m.layer, m.scale);
        save_pgm(&dir.join(format!("{stem}_smf.pgm")), &m.mask.flat_mask, 0, 0.0, 1.0)?;
        save_pgm(&dir.join(format!("{stem}_hm.pgm")), &m.mask.hard_mask, 0, 0.0, 1.0)?;
        println!(
            "{stem}: focused {:.4}, threshold {}",
            m.mask.focused_fraction, m.mask.threshold
        );
    }
    Ok(())
}

pub fn flops(cfg: &RunConfig, fraction: f64, network: bool) -> Result<()> {
    let net_cfg = cfg.net();
    net_cfg.validate()?;
    let layer = net_cfg.layer_config(0);
    let c = cfg.base_channels;
    let report = flops_analytic(c, c, cfg.k, cfg.h, cfg.w, fraction, Widths::of(&layer))?;
    let dir = out_dir(cfg)?;
    let mut text = format!("# one layer, C_in = C_out = {c}, {}x{}\n", cfg.h, cfg.w);
    text.push_str(&report.to_text());
    if network {
        let net: Bi2MaNet<f64> = build_variant(net_cfg, cfg.seed)?;
        let s = synth_samples(&cfg.data(), cfg.seed, 0, 1)?.remove(0);
        let counted = flops_instrumented(&net, &s.pan, &s.lrms, &mut OpTally::on())?;
        let _ = writeln!(text, "\n# whole network, counted ({CONVENTION})");
        text.push_str(&counted.to_text());
        fs::write(dir.join("flops_network.csv"), counted.to_csv())?;
    }
    print!("{text}");
    fs::write(dir.join("flops.txt"), &text)?;
    fs::write(dir.join("flops.csv"), report.to_csv())?;
    Ok(())
}

pub fn gradcheck(cfg: &RunConfig, probes: usize, size: Option<usize>) -> Result<()> {
    let net_cfg = cfg.net();
    net_cfg.validate()?;
    let side = size.unwrap_or_else(|| net_cfg.size_multiple());
    let mut spec = cfg.data();
    spec.height = side;
    spec.width = side;
    let sample = synth_samples(&spec, cfg.seed, 0, 1)?.remove(0);
    let net: Bi2MaNet<f64> = build_variant(net_cfg, cfg.seed)?;
    let results = gradcheck_net(&net, &sample, probes, cfg.seed)?;
    let mut csv = String::from("name,group,index,analytic,numeric,rel_err,pass\n");
    for p in &results {
        let _ = writeln!(
            csv,
            "{},{},{},{},{},{},{}",
            p.name,
            p.group.name(),
            p.index,
            p.analytic,
            p.numeric,
            p.rel_err(),
            p.passes()
        );
    }
    fs::write(out_dir(cfg)?.join("gradcheck.csv"), csv)?;
    let mut groups: Vec<_> = results.iter().map(|p| p.group).collect();
    groups.dedup();
    for g in groups {
        let mine: Vec<_> = results.iter().filter(|p| p.group == g).collect();
        let worst = mine.iter().map(|p| p.rel_err()).fold(0.0, f64::max);
        let ok = mine.iter().filter(|p| p.passes()).count();
        println!("{:<14} {ok:>3}/{:<3} max rel err {worst:.2e}", g.name(), mine.len());
    }
    let failed = results.iter().filter(|p| !p.passes()).count();
    if failed > 0 {
        return Err(GradcheckFailed {
            failed,
            total: results.len(),
        }
        .into());
    }
    println!("all {} probes pass", results.len());
    Ok(())
}

fn load_image(path: &Path) -> Result<Tensor<f64>> {
    let ext = path.extension().and_then(|e| e.to_str()).unwrap_or("");
    Ok(if ext.eq_ignore_ascii_case("pgm") {
        load_pgm(path)?
    } else {
        load_tensor(path)?
    })
}

pub fn analyze(
    input: &Path,
    patch: usize,
    rank_thresh: usize,
    hf_thresh: f64,
    output: Option<PathBuf>,
    class_map: Option<PathBuf>,
) -> Result<()> {
    let img = load_image(input).with_context(|| format!("reading {}", input.display()))?;
    let reports = analyze_image(&img, patch, rank_thresh, hf_thresh)?;
    let mut csv = String::from("patch,row,col,s1,s2,s3,s4,s5,s6,s7,s8,effective_rank,hf_ratio,class\n");
    for r in &reports {
        let _ = write!(csv, "{},{},{}", r.id, r.row, r.col);
        for i in 0..8 {
            match r.profile.singular_values.get(i) {
                Some(s) => {
                    let _ = write!(csv, ",{s}");
                }
                None => csv.push(','),
            }
        }
        let _ = writeln!(csv, ",{},{},{}", r.profile.effective_rank, r.profile.hf_ratio, r.class);
    }
    match output {
        Some(p) => fs::write(p, &csv)?,
        None => print!("{csv}"),
    }
    if let Some(p) = class_map {
        let (h, w) = match *img.shape() {
            [h, w] | [_, h, w] => (h, w),
            _ => unreachable!("analyze_image validated the shape"),
        };
        let mut map = Tensor::<f64>::zeros(&[1, h, w]);
        for r in reports.iter().filter(|r| r.class == PatchClass::Complex) {
            for i in r.row..r.row + patch {
                for j in r.col..r.col + patch {
                    map.set3(0, i, j, 1.0);
                }
            }
        }
        save_pgm(&p, &map, 0, 0.0, 1.0)?;
    }
    Ok(())
}

pub fn synth(cfg: &RunConfig) -> Result<()> {
    let spec = cfg.data();
    let train = synth_samples::<f64>(&spec, cfg.seed, 0, cfg.count)?;
    let val = synth_samples::<f64>(&spec, cfg.seed, cfg.count, cfg.val_count)?;
    let dir = cfg.data_dir().unwrap_or_else(|| cfg.out_dir().join("data"));
    let m = save_dataset(&dir, &train, &val)?;
    println!(
        "wrote {} training and {} validation samples ({} bands, {}x{}) to {}",
        m.train,
        m.val,
        m.bands,
        m.height,
        m.width,
        dir.display()
    );
    Ok(())
}
