//! CSV formats for transactions, aggregated records and price data.
//!
//! * transactions: `chosen,x1,...,xd`, where the last `n_features` columns are
//!   customer features and the rest describe the assortment;
//! * aggregated: `closure_1..closure_N,book_0..book_N`;
//! * prices: `chosen,price_1..price_N`, with `inf` for an absent product.
//!
//! Errors carry 1-based line numbers, the header being line 1.

use std::io::{Read, Write};

use crate::choice::{Dataset, FeatureVector, Transaction};
use crate::error::{Error, Result};
use crate::transforms::{AggregatedRecord, PriceDataset, PriceTransaction};

fn parse_error(line: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        line,
        message: message.into(),
    }
}

fn reader(r: &[u8]) -> csv::Reader<&[u8]> {
    csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .comment(Some(b'#'))
        .from_reader(r)
}

/// Reads every record, checking the header against `expect(width)`.
fn records<R: Read>(
    mut r: R,
    expect: impl Fn(usize) -> Result<Vec<String>>,
) -> Result<(usize, Vec<(usize, csv::StringRecord)>)> {
    let mut buf = Vec::new();
    r.read_to_end(&mut buf)?;
    // the reader's own line count ignores blank lines; a record's offset may
    // also point at blank lines preceding it
    let line_of = |byte: u64| {
        let mut at = (byte as usize).min(buf.len());
        while at < buf.len() && (buf[at] == b'\n' || buf[at] == b'\r') {
            at += 1;
        }
        1 + buf[..at].iter().filter(|&&b| b == b'\n').count()
    };
    let mut rd = reader(buf.as_slice());
    let mut rows = Vec::new();
    let mut header: Option<usize> = None;
    for rec in rd.records() {
        let rec = rec.map_err(|e| {
            let line = e.position().map_or(0, |p| line_of(p.byte()));
            parse_error(line, e.to_string())
        })?;
        let line = rec.position().map_or(0, |p| line_of(p.byte()));
        match header {
            None => {
                let want = expect(rec.len()).map_err(|e| parse_error(line, e.to_string()))?;
                if let Some((k, (got, w))) =
                    rec.iter().zip(&want).enumerate().find(|(_, (g, w))| g != w)
                {
                    return Err(parse_error(
                        line,
                        format!("header column {}: expected `{w}`, found `{got}`", k + 1),
                    ));
                }
                header = Some(rec.len());
            }
            Some(width) => {
                if rec.len() != width {
                    return Err(parse_error(
                        line,
                        format!("expected {width} fields, found {}", rec.len()),
                    ));
                }
                rows.push((line, rec));
            }
        }
    }
    let width = header.ok_or_else(|| parse_error(1, "missing header"))?;
    Ok((width, rows))
}

fn field<T: std::str::FromStr>(
    rec: &csv::StringRecord,
    k: usize,
    line: usize,
    what: &str,
) -> Result<T> {
    let s = &rec[k];
    s.parse().map_err(|_| {
        parse_error(
            line,
            format!("column {}: cannot read `{s}` as {what}", k + 1),
        )
    })
}

fn transaction_header(dim: usize) -> Vec<String> {
    std::iter::once("chosen".to_string())
        .chain((1..=dim).map(|j| format!("x{j}")))
        .collect()
}

/// Reads a transaction CSV whose last `n_features` columns are customer
/// features.
pub fn read_transactions<R: Read>(r: R, n_features: usize) -> Result<Dataset> {
    let (width, rows) = records(r, |w| {
        if w < 2 + n_features {
            return Err(Error::InvalidValue(format!(
                "need `chosen`, at least one product and {n_features} feature columns"
            )));
        }
        Ok(transaction_header(w - 1))
    })?;
    let n = width - 1 - n_features;
    let mut data = Dataset::empty(n, n_features);
    for (line, rec) in rows {
        let chosen: usize = field(&rec, 0, line, "an item index")?;
        let x = (1..width)
            .map(|k| field::<f64>(&rec, k, line, "a number"))
            .collect::<Result<Vec<_>>>()?;
        let t = FeatureVector::new(x)
            .and_then(|x| Transaction::new(chosen, x))
            .and_then(|t| data.push(t));
        t.map_err(|e| parse_error(line, e.to_string()))?;
    }
    Ok(data)
}

pub fn write_transactions<W: Write>(w: W, data: &Dataset) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    wr.write_record(transaction_header(data.dim()))?;
    for t in data.iter() {
        let row =
            std::iter::once(t.chosen.to_string()).chain(t.x.values().iter().map(|v| v.to_string()));
        wr.write_record(row)?;
    }
    wr.flush()?;
    Ok(())
}

fn aggregated_header(n: usize) -> Vec<String> {
    (1..=n)
        .map(|j| format!("closure_{j}"))
        .chain((0..=n).map(|j| format!("book_{j}")))
        .collect()
}

pub fn read_aggregated<R: Read>(r: R) -> Result<Vec<AggregatedRecord>> {
    let (width, rows) = records(r, |w| {
        if w < 3 || w % 2 == 0 {
            return Err(Error::InvalidValue(format!(
                "{w} columns cannot be N closures and N+1 bookings"
            )));
        }
        Ok(aggregated_header((w - 1) / 2))
    })?;
    let n = (width - 1) / 2;
    rows.into_iter()
        .map(|(line, rec)| {
            let closure = (0..n)
                .map(|k| field::<f64>(&rec, k, line, "a number"))
                .collect::<Result<Vec<_>>>()?;
            let bookings = (n..width)
                .map(|k| field::<u64>(&rec, k, line, "a non-negative integer"))
                .collect::<Result<Vec<_>>>()?;
            let r = AggregatedRecord { closure, bookings };
            r.validate().map_err(|e| parse_error(line, e.to_string()))?;
            Ok(r)
        })
        .collect()
}

pub fn write_aggregated<W: Write>(w: W, records: &[AggregatedRecord]) -> Result<()> {
    let n = records
        .first()
        .ok_or(Error::Empty("no aggregated records"))?
        .closure
        .len();
    let mut wr = csv::Writer::from_writer(w);
    wr.write_record(aggregated_header(n))?;
    for r in records {
        let row = r
            .closure
            .iter()
            .map(|v| v.to_string())
            .chain(r.bookings.iter().map(|b| b.to_string()));
        wr.write_record(row)?;
    }
    wr.flush()?;
    Ok(())
}

fn price_header(n: usize) -> Vec<String> {
    std::iter::once("chosen".to_string())
        .chain((1..=n).map(|j| format!("price_{j}")))
        .collect()
}

fn parse_price(s: &str) -> Option<f64> {
    if s == "inf" {
        return Some(f64::INFINITY);
    }
    s.parse::<f64>().ok().filter(|p| p.is_finite())
}

pub fn read_prices<R: Read>(r: R) -> Result<PriceDataset> {
    let (width, rows) = records(r, |w| {
        if w < 2 {
            return Err(Error::InvalidValue(
                "need `chosen` and at least one price column".into(),
            ));
        }
        Ok(price_header(w - 1))
    })?;
    let n = width - 1;
    let mut tx = Vec::with_capacity(rows.len());
    for (line, rec) in rows {
        let chosen: usize = field(&rec, 0, line, "an item index")?;
        let prices = (1..width)
            .map(|k| {
                parse_price(&rec[k]).ok_or_else(|| {
                    parse_error(
                        line,
                        format!("column {}: cannot read `{}` as a price", k + 1, &rec[k]),
                    )
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let t = PriceTransaction { chosen, prices };
        PriceDataset::new(n, vec![t.clone()]).map_err(|e| parse_error(line, e.to_string()))?;
        tx.push(t);
    }
    PriceDataset::new(n, tx)
}

pub fn write_prices<W: Write>(w: W, data: &PriceDataset) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    wr.write_record(price_header(data.n_products))?;
    for t in &data.transactions {
        let row = std::iter::once(t.chosen.to_string()).chain(t.prices.iter().map(|p| {
            if p.is_finite() {
                p.to_string()
            } else {
                "inf".to_string()
            }
        }));
        wr.write_record(row)?;
    }
    wr.flush()?;
    Ok(())
}
