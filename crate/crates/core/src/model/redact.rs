use crate::corpus::Document;
use crate::text::nls;

/// Tokens at least this similar to the target are treated as fuzzy matches.
pub const REDACT_THRESHOLD: f64 = 0.8;

/// Removes every token that matches `target` exactly or fuzzily and blanks
/// the page's visual features. An empty target leaves the document untouched.
pub fn redact(doc: &Document, target: &str, threshold: f64) -> Document {
    let mut out = doc.clone();
    if target.is_empty() {
        return out;
    }
    out.token_stream.retain(|t| nls(t, target) < threshold);
    out.visual.iter_mut().for_each(|v| *v = 0.0);
    out
}
