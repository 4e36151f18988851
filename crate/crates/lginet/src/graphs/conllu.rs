//! CoNLL-U reader.
//!
//! Ten tab-separated columns per token line, blank-line sentence separators,
//! `#` comment lines. Multiword-token ranges (id `3-4`) and empty nodes
//! (id `3.1`) are skipped. Only FORM, HEAD and DEPREL are consumed.

use crate::error::{Error, Result};

/// Parse skeleton: tokens, heads and dependency labels, no aspect or label.
#[derive(Clone, Debug, PartialEq)]
pub struct SentenceSkeleton {
    pub tokens: Vec<String>,
    pub heads: Vec<Option<usize>>,
    pub deprels: Vec<String>,
}

pub fn parse_conllu(text: &str) -> Result<Vec<SentenceSkeleton>> {
    let mut sentences = Vec::new();
    // (form, head 1-based, deprel, source line)
    let mut current: Vec<(String, usize, String, usize)> = Vec::new();

    let mut flush = |current: &mut Vec<(String, usize, String, usize)>| -> Result<()> {
        if current.is_empty() {
            return Ok(());
        }
        let n = current.len();
        let mut tokens = Vec::with_capacity(n);
        let mut heads = Vec::with_capacity(n);
        let mut deprels = Vec::with_capacity(n);
        for (form, head, deprel, line) in current.drain(..) {
            if head > n {
                return Err(Error::format(
                    line,
                    format!("HEAD {head} out of range for sentence of {n} tokens"),
                ));
            }
            tokens.push(form);
            heads.push(if head == 0 { None } else { Some(head - 1) });
            deprels.push(deprel);
        }
        sentences.push(SentenceSkeleton {
            tokens,
            heads,
            deprels,
        });
        Ok(())
    };

    for (lineno, raw) in text.lines().enumerate() {
        let lineno = lineno + 1;
        let line = raw.trim_end_matches('\r');
        if line.trim().is_empty() {
            flush(&mut current)?;
            continue;
        }
        if line.starts_with('#') {
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != 10 {
            return Err(Error::format(
                lineno,
                format!("expected 10 tab-separated columns, found {}", cols.len()),
            ));
        }
        let id = cols[0];
        // Multiword ranges and empty nodes carry no tree edge.
        if id.contains('-') || id.contains('.') {
            continue;
        }
        let head: usize = cols[6]
            .parse()
            .map_err(|_| Error::format(lineno, format!("non-integer HEAD column {:?}", cols[6])))?;
        current.push((cols[1].to_string(), head, cols[7].to_string(), lineno));
    }
    flush(&mut current)?;

    if sentences.is_empty() {
        return Err(Error::format(0, "no sentences in input"));
    }
    Ok(sentences)
}
