//! On-disk layout of a generated dataset.
//!
//! ```text
//! manifest.toml
//! labeled.feats   labeled.txt
//! unlabeled.feats
//! dev.feats       dev.txt
//! test.feats      test.txt
//! lm_text.txt
//! eval/unlabeled.txt
//! ```

use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use super::{DataError, FeatureSequence, Manifest, SplitDataset, UnlabeledUtterance, Utterance};
use crate::container::{read_all_matrices, write_matrix, FEATURE_MAGIC};
use crate::ctc::Vocabulary;

fn open(path: &Path) -> Result<File, DataError> {
    File::open(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => DataError::Missing(path.to_path_buf()),
        _ => DataError::Io(e),
    })
}

pub fn write_features<'a>(
    path: &Path,
    items: impl IntoIterator<Item = &'a FeatureSequence>,
) -> Result<(), DataError> {
    let mut w = BufWriter::new(File::create(path)?);
    for f in items {
        write_matrix(&mut w, FEATURE_MAGIC, f.values())?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_features(path: &Path) -> Result<Vec<FeatureSequence>, DataError> {
    let mut r = BufReader::new(open(path)?);
    let mats = read_all_matrices(&mut r, FEATURE_MAGIC)
        .map_err(|e| DataError::Malformed { path: path.display().to_string(), msg: e.to_string() })?;
    Ok(mats.into_iter().map(FeatureSequence::new).collect())
}

/// One space-separated sentence per line.
pub fn write_transcripts<'a>(
    path: &Path,
    vocab: &Vocabulary,
    items: impl IntoIterator<Item = &'a [usize]>,
) -> Result<(), DataError> {
    let mut w = BufWriter::new(File::create(path)?);
    for labels in items {
        writeln!(w, "{}", vocab.render(labels))?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_transcripts(path: &Path, vocab: &Vocabulary) -> Result<Vec<Vec<usize>>, DataError> {
    let r = BufReader::new(open(path)?);
    r.lines()
        .enumerate()
        .map(|(i, line)| {
            let line = line?;
            vocab.parse(&line).map_err(|e| DataError::Malformed {
                path: path.display().to_string(),
                msg: format!("line {}: {e}", i + 1),
            })
        })
        .collect()
}

fn labeled_split(dir: &Path, name: &str, vocab: &Vocabulary) -> Result<Vec<Utterance>, DataError> {
    let feats = read_features(&dir.join(format!("{name}.feats")))?;
    let labels = read_transcripts(&dir.join(format!("{name}.txt")), vocab)?;
    if feats.len() != labels.len() {
        return Err(DataError::Malformed {
            path: dir.join(format!("{name}.txt")).display().to_string(),
            msg: format!("{} transcripts for {} feature records", labels.len(), feats.len()),
        });
    }
    Ok(feats.into_iter().zip(labels).map(|(features, labels)| Utterance { features, labels }).collect())
}

pub fn write_dataset(dir: &Path, data: &SplitDataset) -> Result<(), DataError> {
    fs::create_dir_all(dir.join("eval"))?;
    let vocab = data.vocabulary();
    let manifest = toml::to_string(&data.manifest)
        .map_err(|e| DataError::InvalidSpec(format!("manifest serialization: {e}")))?;
    fs::write(dir.join("manifest.toml"), manifest)?;
    for (name, split) in [("labeled", &data.labeled), ("dev", &data.dev), ("test", &data.test)] {
        write_features(&dir.join(format!("{name}.feats")), split.iter().map(|u| &u.features))?;
        write_transcripts(&dir.join(format!("{name}.txt")), &vocab, split.iter().map(|u| &u.labels[..]))?;
    }
    write_features(&dir.join("unlabeled.feats"), data.unlabeled.iter().map(|u| &u.features))?;
    write_transcripts(&dir.join("lm_text.txt"), &vocab, data.lm_text.iter().map(|s| &s[..]))?;
    let truth: Vec<&[usize]> = data.unlabeled.iter().filter_map(|u| u.truth.as_deref()).collect();
    if truth.len() == data.unlabeled.len() {
        write_transcripts(&dir.join("eval").join("unlabeled.txt"), &vocab, truth)?;
    }
    Ok(())
}

pub fn load_dataset(dir: &Path) -> Result<SplitDataset, DataError> {
    let manifest_path = dir.join("manifest.toml");
    let text = fs::read_to_string(&manifest_path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => DataError::Missing(manifest_path.clone()),
        _ => DataError::Io(e),
    })?;
    let manifest: Manifest = toml::from_str(&text)
        .map_err(|e| DataError::Malformed { path: manifest_path.display().to_string(), msg: e.to_string() })?;
    let vocab = Vocabulary::new(manifest.tokens.iter().cloned())
        .map_err(|e| DataError::InvalidSpec(e.to_string()))?;
    let labeled = labeled_split(dir, "labeled", &vocab)?;
    let dev = labeled_split(dir, "dev", &vocab)?;
    let test = labeled_split(dir, "test", &vocab)?;
    let feats = read_features(&dir.join("unlabeled.feats"))?;
    let truth_path = dir.join("eval").join("unlabeled.txt");
    let truth = if truth_path.exists() { Some(read_transcripts(&truth_path, &vocab)?) } else { None };
    let unlabeled = match truth {
        Some(t) if t.len() == feats.len() => {
            feats.into_iter().zip(t).map(|(f, t)| UnlabeledUtterance::new(f, Some(t))).collect()
        }
        _ => feats.into_iter().map(|f| UnlabeledUtterance::new(f, None)).collect(),
    };
    let lm_path = dir.join("lm_text.txt");
    let lm_text = if lm_path.exists() { read_transcripts(&lm_path, &vocab)? } else { Vec::new() };
    Ok(SplitDataset { manifest, labeled, unlabeled, dev, test, lm_text })
}
