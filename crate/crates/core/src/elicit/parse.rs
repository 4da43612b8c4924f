//! Verbalized probability parsing.
//!
//! Grammar:
//!
//! - Markdown emphasis (`**`, `__`, `*`, backticks), backslash escapes and the
//!   `&lt;`/`&gt;` entities are stripped before anything else.
//! - Only the content of the **last** complete `<answer>…</answer>` block is read.
//! - Inside it, each label is matched as a standalone token followed by an
//!   optional `)`/`]`, an optional `:`/`=`, and a number. Numbers are decimals
//!   (`0.7`, `.7`, `70`) with an optional `%` suffix that divides by 100.
//!   The first occurrence of each label wins.
//! - Every label must receive a number. A missing label, an absent block, or
//!   zero total mass yields the uniform fallback.
//! - Values are clipped to `[0, 1]` and rescaled to unit mass. The status is
//!   `Parsed` when neither clipping nor rescaling beyond `1e-9` was needed.

use std::sync::OnceLock;

use regex::Regex;

use crate::domain::{Distribution, LabelSpace, ParseStatus, SUM_TOLERANCE};

fn answer_block_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"(?is)<\s*answer\s*>(.*?)<\s*/\s*answer\s*>").expect("static regex"))
}

fn escape_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"\\([^A-Za-z0-9\s])").expect("static regex"))
}

fn clean(raw: &str) -> String {
    let text = raw.replace("\\n", "\n").replace("\\t", " ").replace("&lt;", "<").replace("&gt;", ">");
    let text = escape_re().replace_all(&text, "$1");
    text.replace("**", "").replace("__", "").replace(['*', '`'], "")
}

fn value_re(labels: &LabelSpace) -> Regex {
    let mut alternatives: Vec<&str> = labels.labels().iter().map(String::as_str).collect();
    // Longest first so `AB` is not read as `A`.
    alternatives.sort_by_key(|l| std::cmp::Reverse(l.len()));
    let alternation = alternatives.iter().map(|l| regex::escape(l)).collect::<Vec<_>>().join("|");
    let pattern = format!(
        r"(?:^|[^\p{{L}}\p{{N}}_])({alternation})\s*[)\]]?\s*[:=]?\s*([-+]?(?:\d+(?:\.\d*)?|\.\d+))(?:\s*(%))?"
    );
    Regex::new(&pattern).expect("label alternation is escaped")
}

/// Content of the last complete answer block, after cleaning.
fn last_answer_block(text: &str) -> Option<&str> {
    answer_block_re().captures_iter(text).last().and_then(|c| c.get(1)).map(|m| m.as_str())
}

/// Extracts a distribution from free text. Never fails: unusable input becomes the uniform fallback.
pub fn parse_verbalized(raw_text: &str, labels: &LabelSpace) -> (Distribution, ParseStatus) {
    let k = labels.len();
    let fallback = || (Distribution::uniform(k), ParseStatus::FallbackUniform);

    let cleaned = clean(raw_text);
    let Some(block) = last_answer_block(&cleaned) else {
        return fallback();
    };

    let mut values: Vec<Option<f64>> = vec![None; k];
    for caps in value_re(labels).captures_iter(block) {
        let index = labels.index_of(&caps[1]).expect("alternation only matches known labels");
        if values[index].is_some() {
            continue;
        }
        let Ok(mut v) = caps[2].parse::<f64>() else { continue };
        if caps.get(3).is_some() {
            v /= 100.0;
        }
        values[index] = Some(v);
    }
    let Some(values) = values.into_iter().collect::<Option<Vec<f64>>>() else {
        return fallback();
    };

    let mut clipped = false;
    let values: Vec<f64> = values
        .into_iter()
        .map(|v| {
            let c = v.clamp(0.0, 1.0);
            clipped |= c != v;
            c
        })
        .collect();
    let sum: f64 = values.iter().sum();
    if sum <= 0.0 {
        return fallback();
    }
    if !clipped && (sum - 1.0).abs() <= SUM_TOLERANCE {
        if let Ok(d) = Distribution::validate(values.clone(), k) {
            return (d, ParseStatus::Parsed);
        }
    }
    let rescaled = values.iter().map(|v| v / sum).collect();
    match Distribution::validate(rescaled, k) {
        Ok(d) => (d, ParseStatus::Renormalized),
        Err(_) => fallback(),
    }
}

/// Writes a distribution in the answer-tag format the parser reads, at full precision.
pub fn format_answer(dist: &Distribution, labels: &LabelSpace) -> String {
    let body = labels
        .labels()
        .iter()
        .zip(dist.probs())
        .map(|(l, p)| format!("{l}: {p}"))
        .collect::<Vec<_>>()
        .join(", ");
    format!("<answer>{body}</answer>")
}
