//! CSV and standalone HTML export of a motion pair.

use std::fmt::Write;

use duet_core::motion::MotionSequence;
use duet_core::{Error, Result};

const TEMPLATE: &str = include_str!("anim.html");

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum Format {
    Csv,
    Html,
}

impl Format {
    pub fn extension(self) -> &'static str {
        match self {
            Format::Csv => "csv",
            Format::Html => "html",
        }
    }
}

fn check_pair(a: &MotionSequence, b: &MotionSequence) -> Result<()> {
    if a.frames() != b.frames() || a.skeleton() != b.skeleton() {
        return Err(Error::DimensionMismatch("both persons need the same skeleton and length".into()));
    }
    Ok(())
}

/// One row per frame: the frame index, then x,y,z of every joint of a,
/// then of b. No header.
pub fn to_csv(a: &MotionSequence, b: &MotionSequence) -> Result<String> {
    check_pair(a, b)?;
    let (pa, pb) = (a.positions()?, b.positions()?);
    let mut out = String::new();
    for t in 0..a.frames() {
        write!(out, "{t}").expect("string write");
        for p in [&pa, &pb] {
            for v in p.index_axis(ndarray::Axis(0), t).iter() {
                write!(out, ",{v:.6}").expect("string write");
            }
        }
        out.push('\n');
    }
    Ok(out)
}

fn poses(p: &ndarray::Array3<f64>) -> Vec<Vec<f64>> {
    p.outer_iter().map(|pose| pose.iter().map(|v| (v * 1e5).round() / 1e5).collect()).collect()
}

pub fn to_html(a: &MotionSequence, b: &MotionSequence) -> Result<String> {
    check_pair(a, b)?;
    let data = serde_json::json!({
        "fps": a.fps(),
        "frames": a.frames(),
        "joints": a.joints(),
        "parents": a.skeleton().parents,
        "a": poses(&a.positions()?),
        "b": poses(&b.positions()?),
    });
    Ok(TEMPLATE.replace("/*DATA*/", &serde_json::to_string(&data)?))
}

pub fn export(a: &MotionSequence, b: &MotionSequence, format: Format) -> Result<String> {
    match format {
        Format::Csv => to_csv(a, b),
        Format::Html => to_html(a, b),
    }
}
