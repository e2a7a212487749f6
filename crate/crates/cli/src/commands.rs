use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use nmc_core::bpe::{load_vocab, save_vocab, train_bpe};
use nmc_core::data::{
    load_labeled_csv_with, load_names_csv, split_train_test, ColumnMap, LabelPolicy, LabelSet, NameRecord,
};
use nmc_core::metrics::{
    confusion_matrix, improvement_table, metrics_from_confusion, ConfusionMatrix, ImprovementBasis,
    MetricsReport,
};
use nmc_core::model::{build_encoder, init_classifier_from_lm, load_model, Checkpoint, ModelError, Prediction};
use nmc_core::normalize::Scheme;
use nmc_core::train::{encode_name, normalize_record, train_classifier, train_mlm, TrainConfig};
use nmc_core::Error;

use crate::config::{self, RunConfig};
use crate::{Common, EvaluateArgs, PredictArgs, PretrainArgs, TrainArgs, TrainFlags, TrainTokenizerArgs};

const MERGES_SHOWN: usize = 20;

fn require(path: Option<PathBuf>, flag: &str) -> Result<PathBuf, Error> {
    path.ok_or_else(|| Error::Usage(format!("missing --{flag} (or the matching entry in --config)")))
}

fn existing(path: Option<PathBuf>, flag: &str) -> Result<PathBuf, Error> {
    let path = require(path, flag)?;
    if !path.is_file() {
        return Err(Error::Input(format!("{} file {} does not exist", flag, path.display())));
    }
    Ok(path)
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<(), Error> {
    std::fs::write(path, contents).map_err(|e| Error::Input(format!("cannot write {}: {e}", path.display())))
}

/// `model.nmc` -> `model.<suffix>`
fn sibling(path: &Path, suffix: &str) -> PathBuf {
    path.with_extension(suffix)
}

fn parse_scheme(flag: Option<&str>, config: &RunConfig) -> Result<Scheme, Error> {
    match flag {
        Some(s) => s.parse().map_err(|e: nmc_core::normalize::NormalizeError| Error::Config(e.to_string())),
        None => config.scheme(),
    }
}

fn columns(common: &Common, config: &RunConfig, label_col: Option<&String>) -> ColumnMap {
    let mut c = config.data.columns();
    if let Some(f) = &common.first_col {
        c.first = f.clone();
    }
    if let Some(l) = &common.last_col {
        c.last = l.clone();
    }
    if let Some(l) = label_col {
        c.label = l.clone();
    }
    c
}

fn train_config(flags: &TrainFlags, config: &RunConfig) -> TrainConfig {
    let mut t = config.train.clone();
    t.seed = flags.seed.unwrap_or(t.seed);
    t.n_epochs = flags.epochs.unwrap_or(t.n_epochs);
    t.batch_size = flags.batch_size.unwrap_or(t.batch_size);
    t.learning_rate = flags.lr.unwrap_or(t.learning_rate);
    t.weight_decay = flags.weight_decay.unwrap_or(t.weight_decay);
    t.max_steps = flags.max_steps.or(t.max_steps);
    t.max_len = flags.max_len.unwrap_or(config.tokenizer.max_len);
    t
}

fn load_names(path: &Path, scheme: Scheme, cols: &ColumnMap) -> Result<Vec<nmc_core::normalize::NormalizedName>, Error> {
    let (names, counts) = load_names_csv(path, &cols.first, &cols.last)?;
    eprintln!("read {} names from {} ({counts})", names.len(), path.display());
    names
        .iter()
        .map(|(f, l)| normalize_record(f, l, scheme).map_err(Error::from))
        .collect()
}

pub fn train_tokenizer(a: TrainTokenizerArgs) -> Result<(), Error> {
    let config = RunConfig::load_or_default(a.common.config.as_deref())?;
    let data = existing(a.common.data.clone().or(config.paths.data.clone()), "data")?;
    let out = require(a.out.or(config.paths.vocab.clone()), "out")?;
    let scheme = parse_scheme(a.scheme.as_deref(), &config)?;
    let max_vocab = a.max_vocab.unwrap_or(config.tokenizer.max_vocab);
    let corpus = load_names(&data, scheme, &columns(&a.common, &config, None))?;
    let vocab = train_bpe(&corpus, max_vocab)?;
    save_vocab(&vocab, &out)?;

    let mut msg = format!("vocab_size={}\nmerges={}\ntop merges:\n", vocab.len(), vocab.merges().len());
    for (i, (l, r)) in vocab.merge_strings().iter().take(MERGES_SHOWN).enumerate() {
        let _ = writeln!(msg, "{:>3}  {l} + {r} -> {l}{r}", i + 1);
    }
    print!("{msg}");
    Ok(())
}

pub fn pretrain(a: PretrainArgs) -> Result<(), Error> {
    let config = RunConfig::load_or_default(a.common.config.as_deref())?;
    let data = existing(a.common.data.clone().or(config.paths.data.clone()), "data")?;
    let vocab_path = existing(a.vocab.or(config.paths.vocab.clone()), "vocab")?;
    let out = require(a.out.or(config.paths.model.clone()), "out")?;
    let scheme = parse_scheme(a.train.scheme.as_deref(), &config)?;
    let vocab = load_vocab(&vocab_path)?;
    let tc = train_config(&a.train, &config);
    let mc = config.model.build(vocab.len())?;
    let corpus = load_names(&data, scheme, &columns(&a.common, &config, None))?;

    let (model, curve) = train_mlm(&corpus, &vocab, &mc, &tc)?;
    let checkpoint = Checkpoint {
        model,
        vocab,
        scheme,
        max_len: tc.max_len,
        labels: None,
    };
    checkpoint.save(&out)?;
    write(&a.curve.unwrap_or_else(|| sibling(&out, "loss.tsv")), curve.to_text())?;
    println!(
        "steps={} first_loss={} last_loss={} params={}",
        curve.steps.len(),
        curve.first_loss().unwrap_or(f32::NAN),
        curve.last_loss().unwrap_or(f32::NAN),
        checkpoint.model.parameter_count()
    );
    Ok(())
}

pub fn train(a: TrainArgs) -> Result<(), Error> {
    let config = RunConfig::load_or_default(a.common.config.as_deref())?;
    let data = existing(a.common.data.clone().or(config.paths.data.clone()), "data")?;
    let out = require(a.out.or(config.paths.model.clone()), "out")?;
    let task = a.task.unwrap_or(config.task);
    let labels = config::label_set(task, a.classes.as_deref().or(config.classes.as_deref()))?;
    let mut tc = train_config(&a.train, &config);
    tc.class_weighting |= a.class_weighting;

    let init_lm = match a.init_lm.or(config.paths.init_lm.clone()) {
        Some(p) => Some(load_model(&existing(Some(p), "init-lm")?)?),
        None => None,
    };
    let vocab_path = a.vocab.or(config.paths.vocab.clone());
    let vocab = match (&init_lm, vocab_path) {
        (_, Some(p)) => load_vocab(&existing(Some(p), "vocab")?)?,
        (Some(lm), None) => lm.vocab.clone(),
        (None, None) => return Err(Error::Usage("missing --vocab (needed when --init-lm is absent)".into())),
    };
    let scheme = match (&init_lm, &a.train.scheme) {
        (Some(lm), None) => lm.scheme,
        (_, flag) => parse_scheme(flag.as_deref(), &config)?,
    };

    let cols = columns(&a.common, &config, a.label_col.as_ref());
    let loaded = load_labeled_csv_with(&data, &labels, &cols, LabelPolicy::Strict)?;
    eprintln!("read {} records from {} ({})", loaded.records.len(), data.display(), loaded.counts);
    let split = split_train_test(
        &loaded.records,
        a.test_fraction.unwrap_or(config.data.test_fraction),
        a.split_seed.unwrap_or(config.data.split_seed),
    )?;

    let head_seed = tc.seed.wrapping_add(1);
    let init = match &init_lm {
        Some(lm) => {
            lm.ensure_vocab(&vocab)?;
            init_classifier_from_lm(&lm.model, labels.len(), head_seed)?
        }
        None => {
            let lm = build_encoder(&config.model.build(vocab.len())?, tc.seed)?;
            init_classifier_from_lm(&lm, labels.len(), head_seed)?
        }
    };
    let (model, curve) = train_classifier(&split, &vocab, scheme, init, &tc)?;
    let checkpoint = Checkpoint {
        model,
        vocab,
        scheme,
        max_len: tc.max_len,
        labels: Some(labels.clone()),
    };
    checkpoint.save(&out)?;
    write(&sibling(&out, "loss.tsv"), curve.to_text())?;

    let matrix = confusion_matrix(&checkpoint, &split.test)?;
    let report = metrics_from_confusion(&matrix, &labels)?;
    let report_path = a
        .report
        .or(config.paths.output.clone())
        .unwrap_or_else(|| sibling(&out, "report.txt"));
    write(&report_path, report.to_table())?;
    write(&sibling(&report_path, "json"), report.to_json())?;
    println!(
        "train={} test={} steps={} last_loss={}",
        split.train.len(),
        split.test.len(),
        curve.steps.len(),
        curve.last_loss().unwrap_or(f32::NAN)
    );
    print!("{}", report.to_table());
    Ok(())
}

/// Splits on the last run of whitespace.
pub fn split_full_name(name: &str) -> Result<(&str, &str), Error> {
    let trimmed = name.trim();
    match trimmed.rsplit_once(char::is_whitespace) {
        Some((first, last)) if !first.trim().is_empty() && !last.is_empty() => Ok((first.trim(), last)),
        _ => Err(Error::Usage(format!("cannot split `{name}` into first and last name"))),
    }
}

fn classifier_labels(checkpoint: &Checkpoint) -> Result<LabelSet, Error> {
    match (&checkpoint.labels, checkpoint.model.n_classes()) {
        (Some(l), Some(_)) => Ok(l.clone()),
        _ => Err(ModelError::WrongHead { expected: "classifier" }.into()),
    }
}

fn predict_rows(checkpoint: &Checkpoint, names: &[(String, String)]) -> Result<Vec<Vec<f32>>, Error> {
    let seqs = names
        .iter()
        .map(|(f, l)| encode_name(f, l, checkpoint.scheme, &checkpoint.vocab, checkpoint.max_len))
        .collect::<Result<Vec<_>, _>>()?;
    let mut out = Vec::with_capacity(seqs.len());
    for part in seqs.chunks(256) {
        out.extend(checkpoint.model.probabilities(part)?);
    }
    Ok(out)
}

pub fn predict(a: PredictArgs) -> Result<(), Error> {
    let checkpoint = load_model(&existing(Some(a.model), "model")?)?;
    let labels = classifier_labels(&checkpoint)?;
    if let Some(name) = a.name {
        let (first, last) = split_full_name(&name)?;
        let probs = predict_rows(&checkpoint, &[(first.to_string(), last.to_string())])?;
        let prediction = Prediction {
            labels,
            probabilities: probs.into_iter().next().unwrap_or_default(),
        };
        let mut msg = String::new();
        for (label, p) in prediction.ranked() {
            let _ = writeln!(msg, "{label}\t{p:.6}");
        }
        print!("{msg}");
        return Ok(());
    }

    let input = existing(a.csv, "csv")?;
    let out = require(a.out, "out")?;
    let csv_err = |e: csv::Error| Error::Input(format!("{}: {e}", input.display()));
    let mut reader = csv::Reader::from_path(&input).map_err(csv_err)?;
    let headers = reader.headers().map_err(csv_err)?.clone();
    let index = |col: &str| {
        headers
            .iter()
            .position(|h| h.trim() == col)
            .ok_or_else(|| Error::Input(format!("column `{col}` not found in {}", input.display())))
    };
    let (fi, li) = (index(&a.first_col)?, index(&a.last_col)?);
    let rows: Vec<csv::StringRecord> = reader.records().collect::<Result<_, _>>().map_err(csv_err)?;
    let names: Vec<(String, String)> = rows
        .iter()
        .map(|r| (r.get(fi).unwrap_or("").to_string(), r.get(li).unwrap_or("").to_string()))
        .collect();
    let probs = predict_rows(&checkpoint, &names)?;

    let mut writer = csv::Writer::from_writer(Vec::new());
    let mut header: Vec<String> = headers.iter().map(str::to_string).collect();
    header.extend(labels.classes().iter().map(|c| format!("p_{c}")));
    header.push("predicted".into());
    let write_err = |e: csv::Error| Error::Input(format!("cannot write {}: {e}", out.display()));
    writer.write_record(&header).map_err(write_err)?;
    for (row, p) in rows.iter().zip(&probs) {
        let prediction = Prediction {
            labels: labels.clone(),
            probabilities: p.clone(),
        };
        let mut fields: Vec<String> = row.iter().map(str::to_string).collect();
        fields.extend(p.iter().map(|v| v.to_string()));
        fields.push(prediction.label().to_string());
        writer.write_record(&fields).map_err(write_err)?;
    }
    let bytes = writer.into_inner().map_err(|e| Error::Input(e.to_string()))?;
    write(&out, bytes)?;
    eprintln!("wrote {} rows to {}", rows.len(), out.display());
    Ok(())
}

/// Reads `class,f1` lines; blank lines and `#` comments are skipped, and a
/// first line whose f1 field is not a number is taken as a header.
pub fn read_baseline(path: &Path) -> Result<Vec<(String, f64)>, Error> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Input(format!("cannot read {}: {e}", path.display())))?;
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let bad = || Error::Input(format!("{} line {}: expected `class,f1`, got `{line}`", path.display(), n + 1));
        let (class, f1) = line.split_once(',').ok_or_else(bad)?;
        match f1.trim().parse::<f64>() {
            Ok(v) if v.is_finite() && (0.0..=1.0).contains(&v) => out.push((class.trim().to_string(), v)),
            Err(_) if out.is_empty() && n == 0 => continue,
            _ => return Err(bad()),
        }
    }
    Ok(out)
}

fn predictions_matrix(path: &Path, labels: &LabelSet, label_col: &str) -> Result<ConfusionMatrix, Error> {
    let csv_err = |e: csv::Error| Error::Input(format!("{}: {e}", path.display()));
    let mut reader = csv::Reader::from_path(path).map_err(csv_err)?;
    let headers = reader.headers().map_err(csv_err)?.clone();
    let index = |col: &str| {
        headers
            .iter()
            .position(|h| h.trim() == col)
            .ok_or_else(|| Error::Input(format!("column `{col}` not found in {}", path.display())))
    };
    let (ti, pi) = (index(label_col)?, index("predicted")?);
    let mut truth = Vec::new();
    let mut predicted = Vec::new();
    for (n, row) in reader.records().enumerate() {
        let row = row.map_err(csv_err)?;
        for (i, sink) in [(ti, &mut truth), (pi, &mut predicted)] {
            let raw = row.get(i).unwrap_or("");
            let id = labels.index_of(raw).ok_or_else(|| {
                Error::Input(format!("{} row {}: label `{raw}` is not in `{}`", path.display(), n + 2, labels.name()))
            })?;
            sink.push(id);
        }
    }
    if truth.is_empty() {
        return Err(nmc_core::metrics::MetricsError::EmptyTestSet.into());
    }
    Ok(ConfusionMatrix::from_pairs(&truth, &predicted, labels.len())?)
}

pub fn evaluate(a: EvaluateArgs) -> Result<(), Error> {
    let config = RunConfig::load_or_default(a.common.config.as_deref())?;
    let basis = match a.improvement_basis.as_str() {
        "baseline" => ImprovementBasis::Baseline,
        "model" => ImprovementBasis::Model,
        other => return Err(Error::Usage(format!("unknown --improvement-basis `{other}` (baseline or model)"))),
    };
    let cols = columns(&a.common, &config, a.label_col.as_ref());

    let (matrix, labels) = if let Some(pred) = a.predictions {
        let labels = config::label_set(a.task.unwrap_or(config.task), a.classes.as_deref().or(config.classes.as_deref()))?;
        (predictions_matrix(&existing(Some(pred), "predictions")?, &labels, &cols.label)?, labels)
    } else {
        let checkpoint = load_model(&existing(a.model, "model")?)?;
        let labels = classifier_labels(&checkpoint)?;
        let data = existing(a.common.data.clone().or(config.paths.data.clone()), "data")?;
        let loaded = load_labeled_csv_with(&data, &labels, &cols, LabelPolicy::Strict)?;
        eprintln!("read {} records from {} ({})", loaded.records.len(), data.display(), loaded.counts);
        let records: Vec<NameRecord> = loaded.records;
        (confusion_matrix(&checkpoint, &records)?, labels)
    };
    let report: MetricsReport = metrics_from_confusion(&matrix, &labels)?;
    let mut text = report.to_table();
    if let Some(path) = a.baseline_f1 {
        let baseline = read_baseline(&existing(Some(path), "baseline-f1")?)?;
        let table = improvement_table(&report, &baseline, basis)?;
        text.push('\n');
        text.push_str(&table.to_table());
    }
    print!("{text}");
    if let Some(path) = a.out.or(config.paths.output.clone()) {
        write(&path, &text)?;
    }
    if let Some(path) = a.json {
        write(&path, report.to_json())?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn splits_on_last_whitespace() {
        assert_eq!(split_full_name("George Smith").unwrap(), ("George", "Smith"));
        assert_eq!(split_full_name(" Mary Ann  Lee ").unwrap(), ("Mary Ann", "Lee"));
        for bad in ["Cher", "", "   "] {
            assert_eq!(split_full_name(bad).unwrap_err().exit_code(), 1);
        }
    }

    #[test]
    fn baseline_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("b.csv");
        std::fs::write(&p, "class,f1\n# ethnicolr\nnh_white,0.90\n\nnh_black, 0.55\n").unwrap();
        assert_eq!(
            read_baseline(&p).unwrap(),
            vec![("nh_white".to_string(), 0.90), ("nh_black".to_string(), 0.55)]
        );
        std::fs::write(&p, "nh_white,0.9\nnh_black,abc\n").unwrap();
        assert_eq!(read_baseline(&p).unwrap_err().exit_code(), 2);
        std::fs::write(&p, "nh_white 0.9\n").unwrap();
        assert!(read_baseline(&p).is_err());
    }
}
