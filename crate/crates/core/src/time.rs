//! Millisecond-precision UTC timestamps.
//!
//! The wire form is always `YYYY-MM-DDThh:mm:ss.mmmZ`. No timezones, no
//! sub-millisecond digits; idempotency keys depend on this being canonical.

use alloc::string::String;
use core::fmt;

/// Milliseconds since the Unix epoch, UTC.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct Timestamp(i64);

impl Timestamp {
    pub const fn from_millis(ms: i64) -> Self {
        Timestamp(ms)
    }

    pub const fn millis(self) -> i64 {
        self.0
    }

    /// Whole seconds since the epoch, floored.
    pub const fn unix_seconds(self) -> i64 {
        self.0.div_euclid(1000)
    }

    pub const fn add_millis(self, ms: i64) -> Self {
        Timestamp(self.0 + ms)
    }

    /// Strict parse of the canonical form `YYYY-MM-DDThh:mm:ss.mmmZ`.
    pub fn parse(s: &str) -> Result<Self, TimeError> {
        Self::parse_inner(s, true)
    }

    /// Accepts the canonical form and the second-precision short form
    /// `YYYY-MM-DDThh:mm:ssZ` (used in query parameters).
    pub fn parse_lenient(s: &str) -> Result<Self, TimeError> {
        Self::parse_inner(s, false)
    }

    fn parse_inner(s: &str, require_millis: bool) -> Result<Self, TimeError> {
        let b = s.as_bytes();
        let (date_time_len, millis) = match b.len() {
            24 => {
                if b[19] != b'.' || b[23] != b'Z' {
                    return Err(TimeError);
                }
                (19, parse_digits(&b[20..23])?)
            }
            20 if !require_millis => {
                if b[19] != b'Z' {
                    return Err(TimeError);
                }
                (19, 0)
            }
            _ => return Err(TimeError),
        };
        let b = &b[..date_time_len];
        if b[4] != b'-' || b[7] != b'-' || b[10] != b'T' || b[13] != b':' || b[16] != b':' {
            return Err(TimeError);
        }
        let year = parse_digits(&b[0..4])?;
        let month = parse_digits(&b[5..7])?;
        let day = parse_digits(&b[8..10])?;
        let hour = parse_digits(&b[11..13])?;
        let minute = parse_digits(&b[14..16])?;
        let second = parse_digits(&b[17..19])?;
        if !(1..=12).contains(&month) || !(0..=23).contains(&hour) {
            return Err(TimeError);
        }
        if !(0..=59).contains(&minute) || !(0..=59).contains(&second) {
            return Err(TimeError);
        }
        if day < 1 || day > days_in_month(year, month) {
            return Err(TimeError);
        }
        let days = days_from_civil(year, month, day);
        let ms = (days * 86_400 + hour * 3600 + minute * 60 + second) * 1000 + millis;
        Ok(Timestamp(ms))
    }

    /// Canonical text form.
    pub fn format(self) -> String {
        let mut out = String::with_capacity(24);
        self.write_to(&mut out).expect("fmt to String");
        out
    }

    fn write_to(self, f: &mut dyn fmt::Write) -> fmt::Result {
        let days = self.0.div_euclid(86_400_000);
        let msod = self.0.rem_euclid(86_400_000);
        let (y, m, d) = civil_from_days(days);
        let (hh, rest) = (msod / 3_600_000, msod % 3_600_000);
        let (mm, rest) = (rest / 60_000, rest % 60_000);
        let (ss, ms) = (rest / 1000, rest % 1000);
        write!(
            f,
            "{:04}-{:02}-{:02}T{:02}:{:02}:{:02}.{:03}Z",
            y, m, d, hh, mm, ss, ms
        )
    }
}

impl fmt::Display for Timestamp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.write_to(f)
    }
}

impl fmt::Debug for Timestamp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.write_to(f)
    }
}

/// Malformed or out-of-range timestamp text.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TimeError;

impl fmt::Display for TimeError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("bad-timestamp")
    }
}

fn parse_digits(b: &[u8]) -> Result<i64, TimeError> {
    let mut v: i64 = 0;
    for &c in b {
        if !c.is_ascii_digit() {
            return Err(TimeError);
        }
        v = v * 10 + i64::from(c - b'0');
    }
    Ok(v)
}

fn is_leap(y: i64) -> bool {
    (y % 4 == 0 && y % 100 != 0) || y % 400 == 0
}

fn days_in_month(y: i64, m: i64) -> i64 {
    match m {
        1 | 3 | 5 | 7 | 8 | 10 | 12 => 31,
        4 | 6 | 9 | 11 => 30,
        2 if is_leap(y) => 29,
        2 => 28,
        _ => 0,
    }
}

// Days since 1970-01-01 from a civil date (proleptic Gregorian).
fn days_from_civil(y: i64, m: i64, d: i64) -> i64 {
    let y = if m <= 2 { y - 1 } else { y };
    let era = y.div_euclid(400);
    let yoe = y - era * 400;
    let mp = (m + 9) % 12;
    let doy = (153 * mp + 2) / 5 + d - 1;
    let doe = yoe * 365 + yoe / 4 - yoe / 100 + doy;
    era * 146_097 + doe - 719_468
}

fn civil_from_days(z: i64) -> (i64, i64, i64) {
    let z = z + 719_468;
    let era = z.div_euclid(146_097);
    let doe = z - era * 146_097;
    let yoe = (doe - doe / 1460 + doe / 36_524 - doe / 146_096) / 365;
    let y = yoe + era * 400;
    let doy = doe - (365 * yoe + yoe / 4 - yoe / 100);
    let mp = (5 * doy + 2) / 153;
    let d = doy - (153 * mp + 2) / 5 + 1;
    let m = if mp < 10 { mp + 3 } else { mp - 9 };
    (if m <= 2 { y + 1 } else { y }, m, d)
}
