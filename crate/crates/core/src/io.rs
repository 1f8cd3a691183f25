//! Text formats: dataset, policy, marginal and `B`-matrix CSV, model TOML.
//!
//! Covariate columns are named `w1..wd` and refer to covariate indices
//! `0..d-1`. Policy and marginal files may carry only a subset of them.

use std::collections::BTreeMap;

use crate::data::ObservedDataset;
use crate::error::{Error, Result};
use crate::induced::{BMatrix, InducedMarginal, InstrumentPolicy, Provenance};
use crate::npsem::NpsemSpec;
use crate::table::StratifiedTable;

fn parse_err(msg: impl Into<String>) -> Error {
    Error::Parse(msg.into())
}

fn reader(text: &str) -> csv::Reader<&[u8]> {
    csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes())
}

fn headers(rdr: &mut csv::Reader<&[u8]>) -> Result<Vec<String>> {
    Ok(rdr
        .headers()
        .map_err(|e| parse_err(format!("header: {e}")))?
        .iter()
        .map(str::to_string)
        .collect())
}

fn field(rec: &csv::StringRecord, idx: usize, name: &str) -> Result<f64> {
    let line = rec.position().map_or(0, |p| p.line());
    let raw = rec
        .get(idx)
        .ok_or_else(|| parse_err(format!("line {line}: missing field `{name}`")))?;
    let v: f64 = raw
        .parse()
        .map_err(|_| parse_err(format!("line {line}, field `{name}`: `{raw}` is not a number")))?;
    if !v.is_finite() {
        return Err(parse_err(format!("line {line}, field `{name}`: value is not finite")));
    }
    Ok(v)
}

fn records(rdr: &mut csv::Reader<&[u8]>) -> Result<Vec<csv::StringRecord>> {
    rdr.records()
        .map(|r| r.map_err(|e| parse_err(e.to_string())))
        .collect()
}

/// Covariate index of a `w<k>` header.
fn covariate_index(name: &str) -> Option<usize> {
    let k: usize = name.strip_prefix('w')?.parse().ok()?;
    (k >= 1).then(|| k - 1)
}

pub fn dataset_to_csv(data: &ObservedDataset) -> String {
    let mut out = String::new();
    for d in 1..=data.dim {
        out.push_str(&format!("w{d},"));
    }
    out.push_str("z,a,y\n");
    for i in 0..data.len() {
        for v in data.covariates(i) {
            out.push_str(&format!("{v},"));
        }
        out.push_str(&format!("{},{},{}\n", data.z[i], data.a[i], data.y[i]));
    }
    out
}

pub fn dataset_from_csv(text: &str) -> Result<ObservedDataset> {
    let mut rdr = reader(text);
    let head = headers(&mut rdr)?;
    let n = head.len();
    if n < 3 || head[n - 3..] != ["z", "a", "y"] {
        return Err(parse_err("dataset header must end with z,a,y"));
    }
    let dim = n - 3;
    for (d, h) in head[..dim].iter().enumerate() {
        if covariate_index(h) != Some(d) {
            return Err(parse_err(format!("header column {} is `{h}`, expected `w{}`", d + 1, d + 1)));
        }
    }
    let recs = records(&mut rdr)?;
    let mut w = Vec::with_capacity(recs.len() * dim);
    let mut z = Vec::with_capacity(recs.len());
    let mut a = Vec::with_capacity(recs.len());
    let mut y = Vec::with_capacity(recs.len());
    for rec in &recs {
        for (d, name) in head[..dim].iter().enumerate() {
            w.push(field(rec, d, name)?);
        }
        z.push(field(rec, dim, "z")?);
        a.push(field(rec, dim + 1, "a")?);
        y.push(field(rec, dim + 2, "y")?);
    }
    ObservedDataset::new(dim, w, z, a, y)
}

fn stratified_from_csv(text: &str, value_cols: &[&str]) -> Result<(Vec<usize>, Vec<(Vec<f64>, Vec<f64>)>)> {
    let mut rdr = reader(text);
    let head = headers(&mut rdr)?;
    let k = head.len();
    if k < value_cols.len() || head[k - value_cols.len()..] != *value_cols {
        return Err(parse_err(format!("header must end with {}", value_cols.join(","))));
    }
    let nw = k - value_cols.len();
    let mut columns = Vec::with_capacity(nw);
    for h in &head[..nw] {
        columns.push(covariate_index(h).ok_or_else(|| parse_err(format!("unexpected header column `{h}`")))?);
    }
    let mut out = Vec::new();
    for rec in records(&mut rdr)? {
        let w = (0..nw).map(|d| field(&rec, d, &head[d])).collect::<Result<Vec<_>>>()?;
        let v = value_cols
            .iter()
            .enumerate()
            .map(|(j, name)| field(&rec, nw + j, name))
            .collect::<Result<Vec<_>>>()?;
        out.push((w, v));
    }
    if out.is_empty() {
        return Err(parse_err("no data rows"));
    }
    Ok((columns, out))
}

fn sorted_key(v: &[f64]) -> Vec<u64> {
    // order-preserving bit pattern for BTreeMap keys
    v.iter()
        .map(|x| {
            let b = if *x == 0.0 { 0u64 } else { x.to_bits() };
            if b >> 63 == 1 {
                !b
            } else {
                b | (1 << 63)
            }
        })
        .collect()
}

/// Policy rows `w..,z,prob`; `(stratum, z)` pairs that are absent get zero mass.
pub fn policy_from_csv(text: &str) -> Result<InstrumentPolicy> {
    let (columns, rows) = stratified_from_csv(text, &["z", "prob"])?;
    let mut support: Vec<f64> = rows.iter().map(|(_, v)| v[0]).collect();
    support.sort_by(|a, b| a.total_cmp(b));
    support.dedup();
    let mut by_stratum: BTreeMap<Vec<u64>, (Vec<f64>, Vec<f64>)> = BTreeMap::new();
    for (w, v) in rows {
        let entry = by_stratum
            .entry(sorted_key(&w))
            .or_insert_with(|| (w.clone(), vec![0.0; support.len()]));
        let k = support.iter().position(|s| *s == v[0]).expect("support built from rows");
        if entry.1[k] != 0.0 {
            return Err(parse_err(format!("duplicate policy row for w={w:?}, z={}", v[0])));
        }
        entry.1[k] = v[1];
    }
    let (strata, values): (Vec<_>, Vec<_>) = by_stratum.into_values().unzip();
    InstrumentPolicy::tabular(StratifiedTable::new(columns, strata, support, values)?)
}

fn header_for(columns: &[usize]) -> String {
    columns.iter().map(|c| format!("w{},", c + 1)).collect()
}

pub fn policy_to_csv(table: &StratifiedTable) -> String {
    let mut out = header_for(table.columns());
    out.push_str("z,prob\n");
    for (s, w) in table.strata().iter().enumerate() {
        for (k, z) in table.support().iter().enumerate() {
            for v in w {
                out.push_str(&format!("{v},"));
            }
            out.push_str(&format!("{z},{}\n", table.row(s)[k]));
        }
    }
    out
}

/// Treatment marginal rows `w..,prob` holding `g(1|w)`.
pub fn marginal_from_csv(text: &str) -> Result<InducedMarginal> {
    let (columns, rows) = stratified_from_csv(text, &["prob"])?;
    let mut sorted: Vec<(Vec<f64>, f64)> = rows.into_iter().map(|(w, v)| (w, v[0])).collect();
    sorted.sort_by_key(|a| sorted_key(&a.0));
    let (strata, p1): (Vec<_>, Vec<_>) = sorted.into_iter().unzip();
    let mut g = InducedMarginal::binary(columns, strata, p1)?;
    g.provenance = Provenance::UserTarget;
    Ok(g)
}

/// `g(1|w)` per stratum; probabilities as percentages when `percent`.
pub fn marginal_to_csv(g: &InducedMarginal, percent: bool) -> String {
    let scale = if percent { 100.0 } else { 1.0 };
    let mut out = header_for(g.columns());
    out.push_str("prob\n");
    for (w, p) in g.strata().iter().zip(g.p1_rows()) {
        for v in w {
            out.push_str(&format!("{v},"));
        }
        out.push_str(&format!("{}\n", p * scale));
    }
    out
}

/// Numeric matrix, one treatment value per line, no header.
pub fn b_matrix_from_csv(text: &str) -> Result<BMatrix> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (r, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| parse_err(e.to_string()))?;
        let mut row = Vec::with_capacity(rec.len());
        for (c, raw) in rec.iter().enumerate() {
            let v: f64 = raw
                .parse()
                .map_err(|_| parse_err(format!("B matrix cell (row {}, column {}): `{raw}` is not a number", r + 1, c + 1)))?;
            if !v.is_finite() {
                return Err(parse_err(format!("B matrix cell (row {}, column {}) is not finite", r + 1, c + 1)));
            }
            row.push(v);
        }
        if let Some(first) = rows.first() {
            if first.len() != row.len() {
                return Err(parse_err(format!(
                    "B matrix row {} has {} cells, row 1 has {}",
                    r + 1,
                    row.len(),
                    first.len()
                )));
            }
        }
        rows.push(row);
    }
    BMatrix::from_entries(rows)
}

pub fn spec_from_toml(text: &str) -> Result<NpsemSpec> {
    let spec: NpsemSpec = toml::from_str(text).map_err(|e| parse_err(e.to_string()))?;
    spec.validate()?;
    Ok(spec)
}

pub fn spec_to_toml(spec: &NpsemSpec) -> Result<String> {
    toml::to_string(spec).map_err(|e| parse_err(e.to_string()))
}
