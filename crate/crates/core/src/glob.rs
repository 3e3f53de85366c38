//! Byte-wise glob matching with `*` (any run) and `?` (any single byte).
//!
//! Used for entity id patterns and policy resource patterns. Deliberately
//! not a regex engine: cost is linear-ish and predictable on the broker
//! hot path.

/// Returns true when `pattern` matches all of `text`.
pub fn glob_match(pattern: &str, text: &str) -> bool {
    let p = pattern.as_bytes();
    let t = text.as_bytes();
    let mut pi = 0;
    let mut ti = 0;
    let mut star: Option<usize> = None;
    let mut mark = 0;
    while ti < t.len() {
        if pi < p.len() && (p[pi] == b'?' || p[pi] == t[ti]) {
            pi += 1;
            ti += 1;
        } else if pi < p.len() && p[pi] == b'*' {
            star = Some(pi);
            mark = ti;
            pi += 1;
        } else if let Some(s) = star {
            pi = s + 1;
            mark += 1;
            ti = mark;
        } else {
            return false;
        }
    }
    while pi < p.len() && p[pi] == b'*' {
        pi += 1;
    }
    pi == p.len()
}

/// True when the pattern contains no wildcard, i.e. matches exactly one id.
pub fn is_literal(pattern: &str) -> bool {
    !pattern.bytes().any(|b| b == b'*' || b == b'?')
}
