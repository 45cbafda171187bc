//! File-system helpers: corpus ingestion, CoNLL loading and artifact writes.

use std::path::{Path, PathBuf};

use bidirep_core::corpus::{parse_conll, LabeledSentence};
use bidirep_core::synth::TaggedSentence;
use bidirep_core::tokenizer::Vocab;

use crate::error::{IoContext, Result};

pub fn read(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).at(path)
}

pub fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).at(path)
}

/// Writes through a temporary sibling and renames, so readers never see a
/// half-written artifact.
pub fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).at(dir)?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    std::fs::write(&tmp, bytes).at(&tmp)?;
    std::fs::rename(&tmp, path).at(path)
}

/// Column holding the tag when none is configured: the last one.
pub fn last_column(text: &str) -> usize {
    text.lines()
        .map(|l| l.split_whitespace().count())
        .find(|&n| n > 0)
        .map_or(1, |n| n.saturating_sub(1).max(1))
}

/// Default tag column for a task: NER tags are last, chunk tags precede
/// them and POS tags precede those (`word pos chunk ner`).
pub fn task_column(text: &str, task: &str) -> usize {
    let last = last_column(text);
    match task {
        "chunk" => last.saturating_sub(1).max(1),
        "pos" => last.saturating_sub(2).max(1),
        _ => last,
    }
}

pub fn load_conll(path: &Path, vocab: &Vocab, tag_column: Option<usize>) -> Result<Vec<LabeledSentence>> {
    let text = read_text(path)?;
    let col = tag_column.unwrap_or_else(|| last_column(&text));
    Ok(parse_conll(&text, vocab, col)?)
}

/// `word chunk ner` columns, blank line between sentences.
pub fn to_conll(sentences: &[TaggedSentence]) -> String {
    let mut out = String::new();
    for s in sentences {
        for i in 0..s.words.len() {
            let chunk = s.chunk.get(i).map_or("O", String::as_str);
            out.push_str(&format!("{} {} {}\n", s.words[i], chunk, s.ner[i]));
        }
        out.push('\n');
    }
    out
}

/// Two-column `word tag` text for a tag sequence per sentence.
pub fn tags_to_conll(words: &[Vec<String>], tags: &[Vec<String>]) -> String {
    let mut out = String::new();
    for (ws, ts) in words.iter().zip(tags) {
        for (w, t) in ws.iter().zip(ts) {
            out.push_str(&format!("{w} {t}\n"));
        }
        out.push('\n');
    }
    out
}
