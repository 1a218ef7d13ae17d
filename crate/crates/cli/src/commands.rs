use std::fmt::Write as _;
use std::path::Path;

use anyhow::{Context, Result};
use speechproj_core::checkpoint::Checkpoint;
use speechproj_core::config::ExperimentConfig;
use speechproj_core::corpus::write_corpus;
use speechproj_core::pipeline::{latest_checkpoint, save_run, Pipeline};
use speechproj_core::projector::{average_frames, ProjectorModel};
use speechproj_core::training::{RunOptions, StepLog};
use speechproj_core::Error;

use crate::{AdaptArgs, Cli, Command, DecodeArgs, EvalArgs, ResumeArgs, Stage, SweepArgs};

pub fn run(cli: Cli) -> Result<()> {
    let base = match &cli.config {
        Some(p) => ExperimentConfig::load(p).with_context(|| format!("loading {}", p.display()))?,
        None => ExperimentConfig::default(),
    };
    let mut overrides = cli.overrides.clone();
    // σ given as a flag is a config field like any other, so it lands in
    // the config hash.
    let sigma = match &cli.command {
        Command::Adapt(a) => a.sigma,
        Command::Eval(a) => a.sigma,
        Command::Decode(a) => a.sigma,
        _ => None,
    };
    if let Some(s) = sigma {
        overrides.push(format!("stage2.sigma={s}"));
    }
    if matches!(&cli.command, Command::Eval(a) if a.raw) {
        overrides.push("eval.normalize=false".into());
    }
    let config = base.with_overrides(&overrides)?;
    let p = Pipeline::new(&config)?;
    match cli.command {
        Command::Synth => synth(&p, cli.force),
        Command::PretrainDecoder => pretrain_decoder(&p, cli.force),
        Command::Pretrain(a) => pretrain(&p, cli.force, &a),
        Command::Adapt(a) => adapt(&p, cli.force, &a).map(|_| ()),
        Command::Probe => probe(&p, cli.force),
        Command::Eval(a) => eval(&p, cli.force, &a),
        Command::Decode(a) => decode(&p, &a),
        Command::Sweep(a) => sweep(&p, cli.force, &a),
    }
}

fn refuse_existing(path: &Path, force: bool) -> Result<()> {
    if path.exists() && !force {
        return Err(Error::Argument(format!("{} exists; pass --force to overwrite", path.display())).into());
    }
    Ok(())
}

fn synth(p: &Pipeline, force: bool) -> Result<()> {
    let path = p.corpus_path();
    refuse_existing(&path, force)?;
    let corpus = p.synth()?;
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    write_corpus(&path, &corpus)?;
    p.write_config(p.root())?;
    println!("wrote {} samples to {}", corpus.len(), path.display());
    Ok(())
}

fn pretrain_decoder(p: &Pipeline, force: bool) -> Result<()> {
    let path = p.decoder_path();
    refuse_existing(&path, force)?;
    let corpus = p.load_corpus()?;
    let (dec, report) = p.pretrain_decoder(&corpus)?;
    let dir = p.decoder_dir();
    p.write_config(&dir)?;
    dec.to_checkpoint()?.save(&path)?;
    let mut text = report.log.join("\n");
    let summary = format!(
        "steps={} heldout_wer={:.2} pad_invariance={:.3} checksum={}",
        report.steps,
        report.heldout_wer,
        report.pad_invariance,
        dec.checksum()
    );
    let _ = write!(text, "\n{summary}\n");
    std::fs::write(dir.join("report.txt"), text)?;
    println!("{summary}");
    Ok(())
}

fn run_options(p: &Pipeline, dir: &Path, resume: &ResumeArgs) -> Result<RunOptions> {
    let resume = if resume.resume {
        let ck = latest_checkpoint(dir)?
            .ok_or_else(|| Error::Prerequisite(format!("no checkpoint to resume in {}", dir.display())))?;
        log::info!("resuming from {}", ck.display());
        Some(Checkpoint::load(&ck)?)
    } else {
        None
    };
    Ok(RunOptions {
        checkpoint_dir: Some(dir.to_path_buf()),
        resume,
        config_hash: p.config.hash()?,
    })
}

fn last_line(logs: &[StepLog]) -> String {
    logs.last().map(|l| l.line()).unwrap_or_else(|| "no steps run".into())
}

fn pretrain(p: &Pipeline, force: bool, args: &ResumeArgs) -> Result<()> {
    let dir = p.stage1_dir();
    if !args.resume {
        refuse_existing(&p.stage1_path(), force)?;
    }
    let corpus = p.load_corpus()?;
    let dec = p.load_decoder()?;
    let data = p.prepare_training(&corpus, &dec)?;
    p.write_config(&dir)?;
    let opts = run_options(p, &dir, args)?;
    let (proj, out) = p.stage1(&data, &opts)?;
    let path = save_run(&dir, &proj, &out, opts.config_hash)?;
    println!("{}", last_line(&out.logs));
    println!("decoder forward calls during stage 1: {}", dec.forward_calls());
    println!("wrote {}", path.display());
    Ok(())
}

fn adapt(p: &Pipeline, force: bool, args: &AdaptArgs) -> Result<ProjectorModel> {
    let dir = p.stage2_dir();
    if !args.resume.resume {
        refuse_existing(&p.stage2_path(), force)?;
    }
    let corpus = p.load_corpus()?;
    let dec = p.load_decoder()?;
    let mut proj = if args.from_scratch {
        ProjectorModel::new(p.config.projector.clone())?
    } else {
        p.load_projector(&p.stage1_path(), "pretrain")?
    };
    let data = p.prepare_training(&corpus, &dec)?;
    p.write_config(&dir)?;
    let opts = run_options(p, &dir, &args.resume)?;
    let before = dec.checksum();
    let out = p.stage2(&mut proj, &dec, &data, &opts)?;
    let path = save_run(&dir, &proj, &out, opts.config_hash)?;
    println!("{}", last_line(&out.logs));
    println!("sigma={} decoder checksum {} -> {}", p.config.stage2.sigma, before, dec.checksum());
    println!("wrote {}", path.display());
    Ok(proj)
}

fn probe(p: &Pipeline, force: bool) -> Result<()> {
    let dir = p.reports_dir();
    let path = dir.join("probe.tsv");
    refuse_existing(&path, force)?;
    let corpus = p.load_corpus()?;
    let dec = p.load_decoder()?;
    let report = p.probe(&dec, &corpus)?;
    std::fs::create_dir_all(&dir)?;
    std::fs::write(&path, format!("{}# {}\n", report.table(), report.summary()))?;
    print!("{}", report.table());
    println!("{}", report.summary());
    Ok(())
}

fn load_stage(p: &Pipeline, stage: Stage) -> Result<Option<ProjectorModel>> {
    Ok(match stage {
        Stage::Oracle => None,
        Stage::Stage1 => Some(p.load_projector(&p.stage1_path(), "pretrain")?),
        Stage::Stage2 => Some(p.load_projector(&p.stage2_path(), "adapt")?),
    })
}

fn stage_name(p: &Pipeline, stage: Stage) -> String {
    match stage {
        Stage::Oracle => "oracle".into(),
        Stage::Stage1 => "stage1".into(),
        Stage::Stage2 => format!("stage2-sigma-{}", p.config.stage2.sigma),
    }
}

fn eval(p: &Pipeline, force: bool, args: &EvalArgs) -> Result<()> {
    let dir = p.reports_dir();
    let path = dir.join(format!("eval-{}.tsv", stage_name(p, args.stage)));
    refuse_existing(&path, force)?;
    let corpus = p.load_corpus()?;
    let dec = p.load_decoder()?;
    let proj = load_stage(p, args.stage)?;
    let report = p.evaluate(proj.as_ref(), &dec, &corpus)?;
    std::fs::create_dir_all(&dir)?;
    std::fs::write(&path, format!("{}# {}\n", report.to_tsv(), report.summary()))?;
    println!("{}", report.summary());
    Ok(())
}

fn decode(p: &Pipeline, args: &DecodeArgs) -> Result<()> {
    let dec = p.load_decoder()?;
    let ids = dec.vocab.tokenize(&args.text)?;
    let middle = if args.oracle {
        dec.embed_ids(&ids)
    } else {
        let proj = load_stage(p, args.stage)?.ok_or_else(|| Error::Argument("use --oracle for oracle decoding".into()))?;
        let frames = p.sfm.synth_speech(&ids, args.sample_seed)?;
        proj.project(&average_frames(&frames, proj.config.avg_factor)?)?
    };
    let out = dec.greedy_decode(&dec.context(&middle)?, p.config.eval.max_tokens)?;
    println!("{}", dec.vocab.detokenize(out.words()));
    if out.truncated {
        log::warn!("decoding hit the {}-token cap", p.config.eval.max_tokens);
    }
    Ok(())
}

fn sweep(p: &Pipeline, force: bool, args: &SweepArgs) -> Result<()> {
    let dir = p.reports_dir();
    let path = dir.join("sigma-sweep.tsv");
    refuse_existing(&path, force)?;
    let corpus = p.load_corpus()?;
    let dec = p.load_decoder()?;
    let mut table = String::from("sigma\twer\tcer\ttruncations\n");
    for &sigma in &args.sigmas {
        let config = p.config.with_overrides(&[format!("stage2.sigma={sigma}")])?;
        let ps = Pipeline::new(&config)?;
        let proj = if ps.stage2_path().exists() && !force {
            log::info!("reusing {}", ps.stage2_path().display());
            ps.load_projector(&ps.stage2_path(), "adapt")?
        } else {
            let a = AdaptArgs {
                sigma: Some(sigma),
                from_scratch: false,
                resume: ResumeArgs { resume: false },
            };
            adapt(&ps, true, &a)?
        };
        let report = ps.evaluate(Some(&proj), &dec, &corpus)?;
        let _ = writeln!(table, "{sigma}\t{:.2}\t{:.2}\t{}", report.wer, report.cer, report.truncations);
    }
    std::fs::create_dir_all(&dir)?;
    std::fs::write(&path, &table)?;
    print!("{table}");
    Ok(())
}
