use std::collections::BTreeMap;
use std::path::Path;

use refmel::data::CorpusConfig;
use refmel::model::ModelConfig;
use refmel::train::TrainConfig;
use refmel::{Error, Result};

/// Ordered `key=value` entries of a config file; `#` starts a comment.
pub fn read_key_values(path: &Path) -> Result<BTreeMap<String, String>> {
    let text = std::fs::read_to_string(path)?;
    let mut out = BTreeMap::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap().trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| {
            Error::Config(format!("{}:{}: expected key=value", path.display(), n + 1))
        })?;
        out.insert(k.trim().to_string(), v.trim().to_string());
    }
    Ok(out)
}

/// Applies file entries over a training config and a model config. Keys
/// prefixed with `model.` address the model; all others the optimizer.
pub fn overlay_training(
    entries: &BTreeMap<String, String>,
    train: &mut TrainConfig,
    model: &mut ModelConfig,
) -> Result<()> {
    // The preset decides the model defaults, so it is applied first.
    if let Some(p) = entries.get("preset") {
        train.set("preset", p)?;
        *model = train.preset.model_config();
    }
    let mut model_meta = BTreeMap::new();
    model.to_metadata(&mut model_meta);
    for (k, v) in entries {
        if k == "preset" {
            continue;
        }
        if k.starts_with("model.") {
            if !model_meta.contains_key(k) {
                return Err(Error::Config(format!("unknown model key `{k}`")));
            }
            model_meta.insert(k.clone(), v.clone());
        } else {
            train.set(k, v)?;
        }
    }
    *model = ModelConfig::from_metadata(&model_meta)?;
    Ok(())
}

pub fn overlay_corpus(entries: &BTreeMap<String, String>, cfg: &mut CorpusConfig) -> Result<()> {
    for (k, v) in entries {
        let bad = || Error::Config(format!("bad value `{v}` for `{k}`"));
        let n = || v.parse::<usize>().map_err(|_| bad());
        match k.as_str() {
            "seed" => cfg.seed = v.parse().map_err(|_| bad())?,
            "speakers" => cfg.n_speakers = n()?,
            "utterances" => cfg.utterances_per_speaker = n()?,
            "vocab" => cfg.vocab_size = n()?,
            "min_len" => cfg.min_len = n()?,
            "max_len" => cfg.max_len = n()?,
            "test_size" => cfg.test_size = n()?,
            other => return Err(Error::Config(format!("unknown corpus key `{other}`"))),
        }
    }
    Ok(())
}

pub fn describe_model(model: &ModelConfig) -> String {
    let mut meta = BTreeMap::new();
    model.to_metadata(&mut meta);
    meta.iter().map(|(k, v)| format!("{k}={v}\n")).collect()
}

pub fn describe_corpus(cfg: &CorpusConfig) -> String {
    format!(
        "seed={}\nspeakers={}\nutterances={}\nvocab={}\nmin_len={}\nmax_len={}\ntest_size={}\n",
        cfg.seed,
        cfg.n_speakers,
        cfg.utterances_per_speaker,
        cfg.vocab_size,
        cfg.min_len,
        cfg.max_len,
        cfg.test_size
    )
}

/// Parses `1,2,3`.
pub fn parse_ids(text: &str) -> Result<Vec<usize>> {
    text.split(',')
        .map(|t| {
            t.trim()
                .parse()
                .map_err(|_| Error::Config(format!("bad phoneme id `{t}`")))
        })
        .collect()
}
