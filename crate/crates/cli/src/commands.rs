use std::fs;
use std::io::Write;
use std::path::Path;

use refmel::data::{
    gen_synthetic_corpus, load_corpus, oracle_mel, save_corpus, CorpusConfig, ORACLE_HOP,
    ORACLE_SAMPLE_RATE,
};
use refmel::dsp::{griffin_lim, read_mel, write_mel, write_wav, MelConfig};
use refmel::exper::{
    emit_spectrogram_image, emit_table, emit_timing, emit_trend_chart, eval_objective, median_mse,
    run_grid, GridSpec,
};
use refmel::model::{Checkpoint, Dtype, ModelConfig};
use refmel::tensor::GradCheckReport;
use refmel::train::{
    composite_gradient_check, finetune_with, format_log, op_gradient_checks,
    FinetuneOptions, LogRecord, TrainConfig,
};
use refmel::{Error, Result};

use crate::config::{
    describe_corpus, describe_model, overlay_corpus, overlay_training, parse_ids, read_key_values,
};
use crate::{
    EvaluateArgs, FinetuneArgs, GenDataArgs, GradcheckArgs, GridArgs, PretrainArgs,
    SynthesizeArgs, TrainFlags,
};

/// Prefixes I/O failures with the path involved.
fn at<T>(path: &Path, r: Result<T>) -> Result<T> {
    r.map_err(|e| match e {
        Error::Io(io) => Error::Io(std::io::Error::new(io.kind(), format!("{}: {io}", path.display()))),
        other => other,
    })
}

fn write_file(path: impl AsRef<Path>, data: impl AsRef<[u8]>) -> Result<()> {
    let path = path.as_ref();
    at(path, fs::write(path, data).map_err(Error::from))
}

fn announce(command: &str, resolved: &str) {
    eprintln!("# {command}");
    for line in resolved.lines() {
        eprintln!("#   {line}");
    }
}

/// Desk defaults, then the config file, then flags.
fn resolve_training(base: TrainConfig, flags: &TrainFlags) -> Result<(TrainConfig, ModelConfig)> {
    let mut train = base;
    let mut model = train.preset.model_config();
    if let Some(path) = &flags.config {
        overlay_training(&at(path, read_key_values(path))?, &mut train, &mut model)?;
    }
    if let Some(v) = flags.seed {
        train.seed = v;
    }
    if let Some(v) = flags.steps {
        train.steps = v;
    }
    if let Some(v) = flags.lr {
        train.learning_rate = v;
    }
    if let Some(v) = flags.batch_size {
        train.batch_size = v;
    }
    if let Some(v) = flags.grad_clip {
        train.grad_clip = v;
    }
    train.validate()?;
    Ok((train, model))
}

fn write_log(dest: Option<&Path>, records: &[LogRecord]) -> Result<()> {
    let text = format_log(records);
    match dest {
        Some(path) => write_file(path, text)?,
        None => std::io::stdout().write_all(text.as_bytes())?,
    }
    Ok(())
}

pub fn gen_data(args: GenDataArgs) -> Result<u8> {
    let mut cfg = CorpusConfig::default();
    if let Some(path) = &args.config {
        overlay_corpus(&at(path, read_key_values(path))?, &mut cfg)?;
    }
    if let Some(v) = args.seed {
        cfg.seed = v;
    }
    if let Some(v) = args.speakers {
        cfg.n_speakers = v;
    }
    if let Some(v) = args.utterances {
        cfg.utterances_per_speaker = v;
    }
    if let Some(v) = args.vocab {
        cfg.vocab_size = v;
    }
    announce("gen-data", &describe_corpus(&cfg));
    let corpus = gen_synthetic_corpus(&cfg)?;
    at(&args.out, save_corpus(&corpus, &args.out))?;
    eprintln!("wrote {} utterances to {}", corpus.utterances.len(), args.out.display());
    Ok(0)
}

pub fn pretrain(args: PretrainArgs) -> Result<u8> {
    let (train, model) = resolve_training(TrainConfig::desk_pretrain(), &args.train)?;
    announce("pretrain", &(train.describe() + &describe_model(&model)));
    let corpus = at(&args.data, load_corpus(&args.data))?;
    let outcome = refmel::train::pretrain(&corpus, model, &train)?;
    write_log(args.train.log.as_deref(), &outcome.log)?;
    at(&args.out, outcome.checkpoint.save(&args.out, Dtype::F64))?;
    eprintln!("wrote reference checkpoint {}", args.out.display());
    Ok(0)
}

pub fn finetune(args: FinetuneArgs) -> Result<u8> {
    let (mut train, _) = resolve_training(TrainConfig::desk_finetune(), &args.train)?;
    if let Some(omega) = args.omega {
        train.omega = omega;
    }
    train.validate()?;
    let mut resolved = train.describe();
    resolved += &format!("size={}\ncache_pseudo_labels={}\n", args.size, !args.no_cache);
    announce("finetune", &resolved);
    let reference = at(&args.reference, Checkpoint::load(&args.reference))?;
    let corpus = at(&args.data, load_corpus(&args.data))?;
    let subset = corpus.target_subset(args.size, train.seed)?;
    let options = FinetuneOptions {
        cache_pseudo_labels: !args.no_cache,
    };
    let outcome = finetune_with(&reference, &corpus, &subset, &train, options)?;
    write_log(args.train.log.as_deref(), &outcome.log)?;
    at(&args.out, outcome.checkpoint.save(&args.out, Dtype::F64))?;
    eprintln!("wrote fine-tuned checkpoint {}", args.out.display());
    Ok(0)
}

pub fn synthesize(args: SynthesizeArgs) -> Result<u8> {
    let checkpoint = at(&args.ckpt, Checkpoint::load(&args.ckpt))?;
    let phonemes = parse_ids(&args.phonemes)?;
    let speaker = match args.speaker {
        Some(s) => s,
        None => match checkpoint.get("target_speaker") {
            Some(v) => v
                .parse()
                .map_err(|_| Error::Input(format!("bad target_speaker metadata `{v}`")))?,
            None => 0,
        },
    };
    if speaker >= checkpoint.model.config.n_speakers {
        return Err(Error::Config(format!(
            "speaker {speaker} outside the checkpoint's {} speakers",
            checkpoint.model.config.n_speakers
        )));
    }
    announce(
        "synthesize",
        &format!(
            "phonemes={}\nspeaker={speaker}\niterations={}\n",
            args.phonemes, args.iterations
        ),
    );
    let mel = checkpoint
        .model
        .synthesize(&phonemes, speaker, ORACLE_HOP, ORACLE_SAMPLE_RATE)?;
    at(&args.out_mel, write_mel(&args.out_mel, &mel))?;
    if let Some(path) = &args.out_pgm {
        write_file(path, emit_spectrogram_image(&mel))?;
    }
    if let Some(path) = &args.out_wav {
        let cfg = MelConfig {
            n_mels: mel.n_mels(),
            ..MelConfig::default()
        };
        let out = griffin_lim(&mel, &cfg, args.iterations)?;
        at(path, write_wav(path, &out.signal))?;
    }
    eprintln!("synthesized {} frames", mel.n_frames());
    Ok(0)
}

pub fn grid(args: GridArgs) -> Result<u8> {
    let mut spec = at(&args.spec, GridSpec::load(&args.spec))?;
    if let Some(w) = args.workers {
        spec.workers = w;
    }
    spec.validate()?;
    announce("grid", &spec.describe());
    let reference = at(&spec.reference, Checkpoint::load(&spec.reference))?;
    let corpus = at(&spec.corpus, load_corpus(&spec.corpus))?;
    let result = run_grid(&spec, &reference, &corpus)?;

    let cells_dir = args.out_dir.join("cells");
    at(&cells_dir, fs::create_dir_all(&cells_dir).map_err(Error::from))?;
    write_file(args.out_dir.join("results.csv"), emit_table(&result, spec.timing))?;
    write_file(
        args.out_dir.join("trend.svg"),
        emit_trend_chart(&result, &spec.omegas, &spec.sizes),
    )?;
    write_file(args.out_dir.join("timing.csv"), emit_timing(&result))?;
    for record in &result.records {
        write_file(
            cells_dir.join(format!("{}.log", record.cell.id())),
            format_log(&record.log),
        )?;
    }
    let failed = result.failed();
    let mut failures = String::new();
    for r in &failed {
        failures += &format!("{}\t{}\n", r.cell.id(), r.outcome.as_ref().unwrap_err());
    }
    write_file(args.out_dir.join("failures.txt"), &failures)?;

    for &size in &spec.sizes {
        for &omega in &spec.omegas {
            if let Some(m) = median_mse(&result, omega, size) {
                eprintln!("size {size} omega {omega}: median mel_mse {m:.6}");
            }
        }
    }
    if failed.is_empty() {
        Ok(0)
    } else {
        eprint!("{} failed cells:\n{failures}", failed.len());
        Ok(4)
    }
}

fn write_metrics(dest: Option<&Path>, text: &str) -> Result<()> {
    match dest {
        Some(path) => write_file(path, text)?,
        None => std::io::stdout().write_all(text.as_bytes())?,
    }
    Ok(())
}

pub fn evaluate(args: EvaluateArgs) -> Result<u8> {
    if let Some(path) = &args.mel {
        let phonemes = parse_ids(args.phonemes.as_deref().unwrap_or_default())?;
        let speaker = args.speaker.unwrap_or_default();
        announce(
            "evaluate",
            &format!("mel={}\nspeaker={speaker}\n", path.display()),
        );
        let mel = at(path, read_mel::<f64>(path))?;
        let (oracle, _) = oracle_mel(&phonemes, speaker)?;
        if mel.frames.shape() != oracle.frames.shape() {
            return Err(Error::Alignment(format!(
                "mel has shape {:?}, oracle rendering {:?}",
                mel.frames.shape(),
                oracle.frames.shape()
            )));
        }
        let mse = mel
            .frames
            .data()
            .iter()
            .zip(oracle.frames.data())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            / mel.frames.len() as f64;
        write_metrics(args.out.as_deref(), &format!("mel_mse={mse}\n"))?;
        return Ok(0);
    }
    let (Some(ckpt), Some(data)) = (&args.ckpt, &args.data) else {
        return Err(Error::Config("evaluate needs --ckpt with --data, or --mel".into()));
    };
    announce("evaluate", &format!("ckpt={}\nsplit={}\n", ckpt.display(), args.split));
    let checkpoint = at(ckpt, Checkpoint::load(ckpt))?;
    let corpus = at(data, load_corpus(data))?;
    let indices = match args.split.as_str() {
        "train" => corpus.target_train(),
        _ => corpus.target_test(),
    };
    let m = eval_objective(&checkpoint, &corpus, &indices)?;
    write_metrics(
        args.out.as_deref(),
        &format!("mel_mse={}\ndur_mae={}\n", m.mel_mse, m.dur_mae),
    )?;
    Ok(0)
}

pub fn gradcheck(args: GradcheckArgs) -> Result<u8> {
    announce(
        "gradcheck",
        &format!(
            "seeds=0..{}\ntolerance={}\ncomposite_tolerance={}\nsample={}\nomega={}\n",
            args.seeds, args.tolerance, args.composite_tolerance, args.sample, args.omega
        ),
    );
    let mut failures = 0usize;
    let mut report = |name: &str, seed: u64, r: &GradCheckReport, tolerance: f64| {
        let ok = r.max_rel_error < tolerance;
        if !ok {
            failures += 1;
        }
        println!(
            "{name}\t{seed}\t{:.3e}\t{}\t{}",
            r.max_rel_error,
            r.kinks_skipped,
            if ok { "ok" } else { "FAIL" }
        );
    };
    for seed in 0..args.seeds {
        for (name, r) in op_gradient_checks(seed)? {
            report(&name, seed, &r, args.tolerance);
        }
        let r = composite_gradient_check(ModelConfig::desk(), seed, args.omega, args.sample)?;
        report("composite", seed, &r, args.composite_tolerance);
    }
    eprintln!("{failures} failures");
    Ok(if failures == 0 { 0 } else { 1 })
}
