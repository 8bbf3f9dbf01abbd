//! Sequence-pair demo tables: noisy sequences, their HiPPO-LegS memory
//! trajectories, the running memory distance, and polynomial kernel matrices.
//!
//! One CSV row per (seed, time step). Columns:
//! `config_hash,seed,family,t,x_seq,y_seq,cx_0..,cy_0..,distance,kx_0..,ky_0..`
//! where `kx_j` on row `i` is `k(x_i, x_j)`.

use serde::Serialize;

use crate::benchmarks::{figure2_grid, figure2_sequences, Family, FIGURE2_POINTS};
use crate::error::{Error, Result};
use crate::hippo::{build_legs_operator, encode_sequence, hippo_distance, Kernel};
use crate::record::config_hash;

pub const DEFAULT_FIG2_ORDER: usize = 5;

/// Polynomial kernel of degree 1, offset 1.
pub const FIG2_KERNEL: Kernel = Kernel::Polynomial { degree: 1, offset: 1.0 };

#[derive(Clone, Debug, PartialEq)]
pub struct Fig2Row {
    pub config_hash: String,
    pub seed: u64,
    pub family: String,
    pub t: f64,
    pub x: f64,
    pub y: f64,
    pub cx: Vec<f64>,
    pub cy: Vec<f64>,
    pub distance: f64,
    pub kx: Vec<f64>,
    pub ky: Vec<f64>,
}

#[derive(Serialize)]
struct HashInput<'a> {
    family: &'a str,
    order: usize,
    kernel: Kernel,
    points: usize,
}

pub fn fig2_hash(family: Family, order: usize) -> String {
    config_hash(&HashInput {
        family: &family.to_string(),
        order,
        kernel: FIG2_KERNEL,
        points: FIGURE2_POINTS,
    })
}

/// Rows for one seed, in time order.
pub fn fig2_rows(family: Family, seed: u64, order: usize) -> Result<Vec<Fig2Row>> {
    let op = build_legs_operator(order)?;
    let (xs, ys) = figure2_sequences(family, seed);
    let wrap = |v: &[f64]| v.iter().map(|&a| vec![a]).collect::<Vec<_>>();
    let (xw, yw) = (wrap(&xs), wrap(&ys));
    let (_, tx) = encode_sequence(&op, &xw)?;
    let (_, ty) = encode_sequence(&op, &yw)?;
    let kx = FIG2_KERNEL.matrix(&xw);
    let ky = FIG2_KERNEL.matrix(&yw);
    let hash = fig2_hash(family, order);
    let grid = figure2_grid(FIGURE2_POINTS);
    let mut rows = Vec::with_capacity(xs.len());
    for i in 0..xs.len() {
        rows.push(Fig2Row {
            config_hash: hash.clone(),
            seed,
            family: family.to_string(),
            t: grid[i],
            x: xs[i],
            y: ys[i],
            cx: tx[i].coeffs().col(0),
            cy: ty[i].coeffs().col(0),
            distance: hippo_distance(&tx[i], &ty[i])?,
            kx: kx.row(i).to_vec(),
            ky: ky.row(i).to_vec(),
        });
    }
    Ok(rows)
}

fn num(v: f64) -> String {
    format!("{v:.16e}")
}

pub fn write_fig2_csv(rows: &[Fig2Row], out: impl std::io::Write) -> Result<()> {
    let first = rows.first().ok_or(Error::EmptyInput)?;
    let (order, width) = (first.cx.len(), first.kx.len());
    let mut w = csv::Writer::from_writer(out);
    let mut header: Vec<String> = ["config_hash", "seed", "family", "t", "x_seq", "y_seq"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    header.extend((0..order).map(|i| format!("cx_{i}")));
    header.extend((0..order).map(|i| format!("cy_{i}")));
    header.push("distance".into());
    header.extend((0..width).map(|i| format!("kx_{i}")));
    header.extend((0..width).map(|i| format!("ky_{i}")));
    w.write_record(&header).map_err(csv_err)?;
    for r in rows {
        if r.cx.len() != order || r.cy.len() != order || r.kx.len() != width || r.ky.len() != width {
            return Err(Error::ShapeMismatch("fig2 rows have inconsistent widths".into()));
        }
        let mut rec = vec![
            r.config_hash.clone(),
            r.seed.to_string(),
            r.family.clone(),
            num(r.t),
            num(r.x),
            num(r.y),
        ];
        rec.extend(r.cx.iter().chain(&r.cy).map(|&v| num(v)));
        rec.push(num(r.distance));
        rec.extend(r.kx.iter().chain(&r.ky).map(|&v| num(v)));
        w.write_record(&rec).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

fn csv_err(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::Parse(format!("csv: {other:?}")),
    }
}

fn count_prefix(header: &csv::StringRecord, prefix: &str, start: usize) -> usize {
    header
        .iter()
        .skip(start)
        .enumerate()
        .take_while(|(i, h)| *h == format!("{prefix}{i}"))
        .count()
}

pub fn parse_fig2_csv(text: &str) -> Result<Vec<Fig2Row>> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(text.as_bytes());
    let header = rdr.headers().map_err(csv_err)?.clone();
    let fixed = ["config_hash", "seed", "family", "t", "x_seq", "y_seq"];
    if header.len() < fixed.len() || header.iter().zip(fixed).any(|(a, b)| a != b) {
        return Err(Error::Parse(format!("fig2 header must start with {}", fixed.join(","))));
    }
    let order = count_prefix(&header, "cx_", 6);
    let cy_at = 6 + order;
    if order == 0 || count_prefix(&header, "cy_", cy_at) != order || header.get(cy_at + order) != Some("distance") {
        return Err(Error::Parse("fig2 header: bad coefficient columns".into()));
    }
    let kx_at = cy_at + order + 1;
    let width = count_prefix(&header, "kx_", kx_at);
    if count_prefix(&header, "ky_", kx_at + width) != width || header.len() != kx_at + 2 * width {
        return Err(Error::Parse("fig2 header: bad kernel columns".into()));
    }
    let mut rows = Vec::new();
    for (line, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(csv_err)?;
        let bad = |m: &str| Error::Parse(format!("fig2 row {}: {m}", line + 1));
        let f = |i: usize| -> Result<f64> {
            let v: f64 = rec[i].parse().map_err(|_| bad(&format!("bad number {:?}", &rec[i])))?;
            if v.is_finite() {
                Ok(v)
            } else {
                Err(bad("non-finite number"))
            }
        };
        let span = |a: usize, n: usize| (a..a + n).map(f).collect::<Result<Vec<f64>>>();
        rows.push(Fig2Row {
            config_hash: rec[0].to_string(),
            seed: rec[1].parse().map_err(|_| bad("bad seed"))?,
            family: rec[2].to_string(),
            t: f(3)?,
            x: f(4)?,
            y: f(5)?,
            cx: span(6, order)?,
            cy: span(cy_at, order)?,
            distance: f(cy_at + order)?,
            kx: span(kx_at, width)?,
            ky: span(kx_at + width, width)?,
        });
    }
    Ok(rows)
}
