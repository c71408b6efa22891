//! Exact element counts for each way of storing word representations.
//!
//! | method       | elements                                 |
//! |--------------|------------------------------------------|
//! | conventional | `D_e · V`                                |
//! | naive        | `D_o + D_inter · (D_o + D_e) + D_o · V`  |
//! | proposed     | `D_o + D_inter · (D_o + D_e) + M · D_o · c` |
//! | volatile     | `D_o + D_inter · (D_o + D_e)`            |
//!
//! Counts are logical elements; [`FootprintReport::bytes`] converts them for
//! a chosen element width. All arithmetic is checked integer arithmetic.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Method {
    Conventional,
    AloneNaive,
    AloneProposed,
    AloneVolatile,
}

impl Method {
    pub const ALL: [Method; 4] = [
        Method::Conventional,
        Method::AloneNaive,
        Method::AloneProposed,
        Method::AloneVolatile,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Method::Conventional => "conventional",
            Method::AloneNaive => "naive",
            Method::AloneProposed => "proposed",
            Method::AloneVolatile => "volatile",
        }
    }

    fn symbols(&self) -> &'static [&'static str] {
        match self {
            Method::Conventional => &["D_e", "V"],
            Method::AloneNaive => &["D_o", "D_inter", "D_e", "V"],
            Method::AloneProposed => &["D_o", "D_inter", "D_e", "M", "c"],
            Method::AloneVolatile => &["D_o", "D_inter", "D_e"],
        }
    }
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown footprint method `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct FootprintInputs {
    pub d_e: u64,
    pub vocab: u64,
    pub d_o: u64,
    pub d_inter: u64,
    pub c: u64,
    pub m: u64,
}

impl FootprintInputs {
    fn get(&self, symbol: &str) -> u64 {
        match symbol {
            "D_e" => self.d_e,
            "V" => self.vocab,
            "D_o" => self.d_o,
            "D_inter" => self.d_inter,
            "c" => self.c,
            "M" => self.m,
            _ => unreachable!("unknown symbol {symbol}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FootprintReport {
    pub method: Method,
    pub element_count: u64,
    pub formula_inputs: BTreeMap<&'static str, u64>,
}

impl FootprintReport {
    pub fn bytes(&self, element_width: u64) -> Option<u64> {
        self.element_count.checked_mul(element_width)
    }
}

fn overflow() -> Error {
    Error::Config("element count overflows 64 bits".into())
}

fn mul(a: u64, b: u64) -> Result<u64> {
    a.checked_mul(b).ok_or_else(overflow)
}

fn add(a: u64, b: u64) -> Result<u64> {
    a.checked_add(b).ok_or_else(overflow)
}

/// Element count of `method`. Only the inputs the method's formula uses are
/// validated; each must be positive.
pub fn footprint(method: Method, inputs: &FootprintInputs) -> Result<FootprintReport> {
    let mut formula_inputs = BTreeMap::new();
    for &s in method.symbols() {
        let v = inputs.get(s);
        if v == 0 {
            return Err(Error::Config(format!(
                "{s} must be positive for the {} footprint",
                method.name()
            )));
        }
        formula_inputs.insert(s, v);
    }
    let FootprintInputs {
        d_e,
        vocab,
        d_o,
        d_inter,
        c,
        m,
    } = *inputs;
    let shared = || add(d_o, mul(d_inter, add(d_o, d_e)?)?);
    let element_count = match method {
        Method::Conventional => mul(d_e, vocab)?,
        Method::AloneNaive => add(shared()?, mul(d_o, vocab)?)?,
        Method::AloneProposed => add(shared()?, mul(mul(m, d_o)?, c)?)?,
        Method::AloneVolatile => shared()?,
    };
    Ok(FootprintReport {
        method,
        element_count,
        formula_inputs,
    })
}

/// `1234567` → `"1,234,567"`.
pub fn group_thousands(n: u64) -> String {
    let digits = n.to_string();
    let mut out = String::with_capacity(digits.len() + digits.len() / 3);
    for (i, ch) in digits.chars().enumerate() {
        if i > 0 && (digits.len() - i).is_multiple_of(3) {
            out.push(',');
        }
        out.push(ch);
    }
    out
}

/// Element count in millions rounded to one decimal place, as an integer
/// number of tenths (`360_300` → `4`, i.e. 0.4M). Half-up rounding.
pub fn millions_tenths(n: u64) -> u64 {
    (n + 50_000) / 100_000
}

fn inputs_text(r: &FootprintReport) -> String {
    r.formula_inputs
        .iter()
        .map(|(k, v)| format!("{k}={v}"))
        .collect::<Vec<_>>()
        .join(" ")
}

/// Aligned human-readable table.
pub fn render_table(reports: &[FootprintReport], element_width: Option<u64>) -> String {
    let rows: Vec<[String; 4]> = reports
        .iter()
        .map(|r| {
            let t = millions_tenths(r.element_count);
            [
                r.method.name().to_string(),
                group_thousands(r.element_count),
                match element_width.and_then(|w| r.bytes(w)) {
                    Some(b) => group_thousands(b),
                    None => format!("{}.{}M", t / 10, t % 10),
                },
                inputs_text(r),
            ]
        })
        .collect();
    let header = [
        "method".to_string(),
        "elements".to_string(),
        if element_width.is_some() { "bytes" } else { "approx" }.to_string(),
        "inputs".to_string(),
    ];
    let mut widths = [0usize; 4];
    for row in std::iter::once(&header).chain(&rows) {
        for (w, cell) in widths.iter_mut().zip(row) {
            *w = (*w).max(cell.len());
        }
    }
    let mut out = String::new();
    for row in std::iter::once(&header).chain(&rows) {
        let _ = writeln!(
            out,
            "{:<w0$}  {:>w1$}  {:>w2$}  {}",
            row[0],
            row[1],
            row[2],
            row[3],
            w0 = widths[0],
            w1 = widths[1],
            w2 = widths[2]
        );
    }
    out
}

/// Tab-separated `method, elements, bytes, inputs` with a header line.
pub fn render_tsv(reports: &[FootprintReport], element_width: Option<u64>) -> String {
    let mut out = String::from("method\telements\tbytes\tinputs\n");
    for r in reports {
        let bytes = element_width
            .and_then(|w| r.bytes(w))
            .map(|b| b.to_string())
            .unwrap_or_default();
        let _ = writeln!(
            out,
            "{}\t{}\t{}\t{}",
            r.method.name(),
            r.element_count,
            bytes,
            inputs_text(r)
        );
    }
    out
}
