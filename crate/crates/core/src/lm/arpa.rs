//! ARPA-style text serialization.
//!
//! ```text
//! \data\
//! order=2
//! smoothing=witten_bell            (or: smoothing=add_k <k>)
//! vocab=a b c
//! ngram 1=4
//! ngram 2=7
//!
//! \1-grams:
//! <log10 prob>\t<symbols>[\t<log10 backoff>]
//! ...
//! \end\
//! ```
//!
//! Lines within a section are sorted by symbol id. `<s>` is never predicted,
//! so its unigram line carries the placeholder probability `-99` and only a
//! backoff weight. Floats use the shortest representation that parses back
//! to the same bits, so write -> read -> write is byte-identical.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{BufRead, Write};

use super::{LmError, NgramModel, Smoothing};

const BOS: &str = "<s>";
const EOS: &str = "</s>";

fn symbol_name(model: &NgramModel, s: u32) -> &str {
    if s == model.end_symbol() {
        EOS
    } else if s == model.begin_symbol() {
        BOS
    } else {
        &model.tokens[s as usize]
    }
}

pub fn write_arpa<W: Write>(model: &NgramModel, mut w: W) -> Result<(), LmError> {
    if model.tokens.iter().any(|t| t == BOS || t == EOS) {
        return Err(LmError::Parse { line: 0, msg: "vocabulary collides with <s>/</s>".into() });
    }
    let sections: Vec<BTreeSet<&Vec<u32>>> = (1..=model.order)
        .map(|m| {
            let mut keys: BTreeSet<&Vec<u32>> = model.probs[m - 1].keys().collect();
            if m < model.order {
                keys.extend(model.backoffs[m].keys());
            }
            keys
        })
        .collect();

    writeln!(w, "\\data\\")?;
    writeln!(w, "order={}", model.order)?;
    match model.smoothing {
        Smoothing::WittenBell => writeln!(w, "smoothing=witten_bell")?,
        Smoothing::AddK { k } => writeln!(w, "smoothing=add_k {k}")?,
    }
    writeln!(w, "vocab={}", model.tokens.join(" "))?;
    for (m, keys) in sections.iter().enumerate() {
        writeln!(w, "ngram {}={}", m + 1, keys.len())?;
    }
    for (m, keys) in sections.iter().enumerate() {
        writeln!(w)?;
        writeln!(w, "\\{}-grams:", m + 1)?;
        for &gram in keys {
            let names: Vec<&str> = gram.iter().map(|&s| symbol_name(model, s)).collect();
            let prob = model.probs[m].get(gram);
            match prob {
                Some(p) => write!(w, "{p}\t{}", names.join(" "))?,
                None => write!(w, "-99\t{}", names.join(" "))?,
            }
            if m + 1 < model.order {
                if let Some(b) = model.backoffs[m + 1].get(gram) {
                    write!(w, "\t{b}")?;
                }
            }
            writeln!(w)?;
        }
    }
    writeln!(w)?;
    writeln!(w, "\\end\\")?;
    Ok(())
}

pub fn read_arpa<R: BufRead>(r: R) -> Result<NgramModel, LmError> {
    let mut order = None;
    let mut smoothing = None;
    let mut tokens: Option<Vec<String>> = None;
    let mut probs: Vec<BTreeMap<Vec<u32>, f64>> = Vec::new();
    let mut backoffs: Vec<BTreeMap<Vec<u32>, f64>> = Vec::new();
    let mut section: Option<usize> = None;
    let mut ended = false;

    for (i, line) in r.lines().enumerate() {
        let line = line?;
        let lineno = i + 1;
        let err = |msg: &str| LmError::Parse { line: lineno, msg: msg.to_string() };
        let line = line.trim_end();
        if line.is_empty() || line == "\\data\\" {
            continue;
        }
        if line == "\\end\\" {
            ended = true;
            break;
        }
        if let Some(rest) = line.strip_prefix("order=") {
            let n: usize = rest.parse().map_err(|_| err("bad order"))?;
            if n == 0 {
                return Err(LmError::ZeroOrder);
            }
            order = Some(n);
            probs = vec![BTreeMap::new(); n];
            backoffs = vec![BTreeMap::new(); n];
            continue;
        }
        if let Some(rest) = line.strip_prefix("smoothing=") {
            smoothing = Some(match rest.split_once(' ') {
                None if rest == "witten_bell" => Smoothing::WittenBell,
                Some(("add_k", k)) => Smoothing::AddK { k: k.parse().map_err(|_| err("bad k"))? },
                _ => return Err(err("unknown smoothing")),
            });
            continue;
        }
        if let Some(rest) = line.strip_prefix("vocab=") {
            tokens = Some(rest.split(' ').map(str::to_string).collect());
            continue;
        }
        if line.starts_with("ngram ") {
            continue;
        }
        if let Some(rest) = line.strip_prefix('\\') {
            let m: usize = rest
                .strip_suffix("-grams:")
                .and_then(|n| n.parse().ok())
                .ok_or_else(|| err("bad section header"))?;
            if order.is_none_or(|n| m == 0 || m > n) {
                return Err(err("section outside declared order"));
            }
            section = Some(m);
            continue;
        }

        let m = section.ok_or_else(|| err("entry outside a section"))?;
        let toks = tokens.as_ref().ok_or_else(|| err("vocab line missing"))?;
        let mut fields = line.split('\t');
        let prob: f64 = fields
            .next()
            .and_then(|f| f.parse().ok())
            .ok_or_else(|| err("bad probability"))?;
        let names = fields.next().ok_or_else(|| err("missing n-gram"))?;
        let gram: Vec<u32> = names
            .split(' ')
            .map(|n| match n {
                EOS => Ok(toks.len() as u32),
                BOS => Ok(toks.len() as u32 + 1),
                _ => toks.iter().position(|t| t == n).map(|p| p as u32).ok_or_else(|| err("unknown symbol")),
            })
            .collect::<Result<_, _>>()?;
        if gram.len() != m {
            return Err(err("n-gram length does not match section"));
        }
        if *gram.last().expect("m >= 1") != toks.len() as u32 + 1 {
            probs[m - 1].insert(gram.clone(), prob);
        }
        if let Some(b) = fields.next() {
            let b: f64 = b.parse().map_err(|_| err("bad backoff"))?;
            if m >= backoffs.len() {
                return Err(err("backoff on highest order"));
            }
            backoffs[m].insert(gram, b);
        }
    }
    if !ended {
        return Err(LmError::Parse { line: 0, msg: "missing \\end\\ marker".into() });
    }
    let order = order.ok_or(LmError::Parse { line: 0, msg: "missing order".into() })?;
    let smoothing = smoothing.ok_or(LmError::Parse { line: 0, msg: "missing smoothing".into() })?;
    let tokens = tokens.ok_or(LmError::Parse { line: 0, msg: "missing vocab".into() })?;
    Ok(NgramModel::from_parts(order, tokens, smoothing, probs, backoffs))
}
