//! Newline-delimited JSON dataset files.

use std::collections::HashSet;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::vocab::Vocab;
use super::{ClassificationDataset, LabeledExample, Seq2SeqDataset, Seq2SeqExample};
use crate::attention::ImpermissibleMask;
use crate::error::{Error, Result};

#[derive(Serialize, Deserialize)]
struct ClassificationRecord {
    tokens: Vec<String>,
    label: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    mask: Option<Vec<u8>>,
}

#[derive(Serialize, Deserialize)]
struct Seq2SeqRecord {
    src: Vec<usize>,
    tgt: Vec<usize>,
    align: Vec<Vec<usize>>,
}

fn lines(path: &Path) -> Result<impl Iterator<Item = (usize, std::io::Result<String>)>> {
    let reader = BufReader::new(File::open(path)?);
    Ok(reader.lines().enumerate().map(|(i, l)| (i + 1, l)))
}

fn parse_err(line: usize, e: impl std::fmt::Display) -> Error {
    Error::Parse {
        line,
        message: e.to_string(),
    }
}

/// Loads a classification corpus, building a fresh vocabulary. A token is
/// impermissible when its lowercase form is in `lexicon` (also lowercased).
pub fn load_corpus<S: AsRef<str>>(path: &Path, lexicon: &[S]) -> Result<ClassificationDataset> {
    let mut vocab = Vocab::new();
    read_classification(path, lexicon, &mut vocab, true)
}

/// Reads a classification corpus against `vocab`. With `grow` unseen tokens
/// are added; otherwise they map to the unknown id. Records may carry an
/// explicit `"mask"` of 0/1 flags that overrides the lexicon match.
pub fn read_classification<S: AsRef<str>>(
    path: &Path,
    lexicon: &[S],
    vocab: &mut Vocab,
    grow: bool,
) -> Result<ClassificationDataset> {
    let lex: HashSet<String> = lexicon.iter().map(|s| s.as_ref().to_lowercase()).collect();
    let mut examples = Vec::new();
    let mut num_classes = 2;
    for (line, text) in lines(path)? {
        let text = text?;
        if text.trim().is_empty() {
            continue;
        }
        let rec: ClassificationRecord = serde_json::from_str(&text).map_err(|e| parse_err(line, e))?;
        let mask = match rec.mask {
            Some(bits) => {
                if bits.len() != rec.tokens.len() {
                    return Err(parse_err(line, "mask length differs from token count"));
                }
                ImpermissibleMask::from_bits(&bits).map_err(|e| parse_err(line, e))?
            }
            None => ImpermissibleMask(rec.tokens.iter().map(|t| lex.contains(&t.to_lowercase())).collect()),
        };
        let tokens = if grow {
            rec.tokens.iter().map(|t| vocab.intern(t)).collect()
        } else {
            vocab.encode(&rec.tokens)
        };
        num_classes = num_classes.max(rec.label + 1);
        examples.push(LabeledExample {
            tokens,
            label: rec.label,
            mask,
        });
    }
    if examples.is_empty() {
        return Err(Error::InvalidInput(format!("{} holds no records", path.display())));
    }
    let lexicon_ids = (0..vocab.len())
        .filter(|&i| vocab.token(i).is_ok_and(|t| lex.contains(&t.to_lowercase())))
        .collect();
    Ok(ClassificationDataset {
        vocab: vocab.clone(),
        num_classes,
        lexicon: lexicon_ids,
        examples,
    })
}

/// Writes examples as token strings with their masks.
pub fn write_classification(path: &Path, data: &ClassificationDataset) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    for e in &data.examples {
        let rec = ClassificationRecord {
            tokens: data.vocab.decode(&e.tokens)?,
            label: e.label,
            mask: Some(e.mask.bits()),
        };
        serde_json::to_writer(&mut out, &rec)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

pub fn write_seq2seq(path: &Path, data: &Seq2SeqDataset) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    for e in &data.examples {
        let rec = Seq2SeqRecord {
            src: e.src.clone(),
            tgt: e.tgt.clone(),
            align: e.align.clone(),
        };
        serde_json::to_writer(&mut out, &rec)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

/// Reads seq2seq records of integer ids; every id must be below `vocab.len()`
/// and every alignment index inside the source.
pub fn read_seq2seq(path: &Path, vocab: &Vocab) -> Result<Seq2SeqDataset> {
    let mut examples = Vec::new();
    for (line, text) in lines(path)? {
        let text = text?;
        if text.trim().is_empty() {
            continue;
        }
        let rec: Seq2SeqRecord = serde_json::from_str(&text).map_err(|e| parse_err(line, e))?;
        if rec.align.len() != rec.tgt.len() {
            return Err(parse_err(line, "align must have one entry per target token"));
        }
        if let Some(&bad) = rec.src.iter().chain(&rec.tgt).find(|&&t| t >= vocab.len()) {
            return Err(parse_err(line, format!("token id {bad} outside vocabulary")));
        }
        if rec.align.iter().flatten().any(|&i| i >= rec.src.len()) {
            return Err(parse_err(line, "alignment index outside source"));
        }
        examples.push(Seq2SeqExample {
            src: rec.src,
            tgt: rec.tgt,
            align: rec.align,
        });
    }
    if examples.is_empty() {
        return Err(Error::InvalidInput(format!("{} holds no records", path.display())));
    }
    Ok(Seq2SeqDataset {
        vocab: vocab.clone(),
        examples,
    })
}

/// Reads a lexicon file: one token per line, blank lines ignored.
pub fn load_lexicon(path: &Path) -> Result<Vec<String>> {
    let text = std::fs::read_to_string(path)?;
    Ok(text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(str::to_string)
        .collect())
}
