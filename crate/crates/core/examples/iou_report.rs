//! Pooled against per-episode IoU on hand-made masks, and the report formats.
//!
//! cargo run --example iou_report

use frinet::evaluation::{format_reports, ConfusionAccumulator, EvalReport, IouMode, ReportFormat};
use ndarray::Array2;

fn square(size: usize, lo: usize, hi: usize) -> Array2<u8> {
    Array2::from_shape_fn((size, size), |(y, x)| {
        u8::from((lo..hi).contains(&y) && (lo..hi).contains(&x))
    })
}

fn main() -> anyhow::Result<()> {
    let mut acc = ConfusionAccumulator::new();
    // a small object predicted perfectly and a large one predicted at half size
    acc.accumulate(&square(16, 4, 6), &square(16, 4, 6), 3)?;
    acc.accumulate(&square(16, 0, 8), &square(16, 0, 12), 3)?;
    let mut missed = square(16, 2, 10);
    missed[[0, 0]] = 255;
    acc.accumulate(&Array2::zeros((16, 16)), &missed, 7)?;

    let mut reports = Vec::new();
    for mode in [IouMode::Pooled, IouMode::PerEpisodeMean] {
        let report = EvalReport::from_accumulator(&acc, mode, 0, 1, 3, "example".into(), "none".into())?;
        println!(
            "{:<16} per class {:?} mIoU {:.4}",
            mode.name(),
            report.per_class_iou,
            report.miou
        );
        reports.push((mode.name().to_string(), report));
    }
    println!("{}", format_reports(&reports, ReportFormat::Markdown));
    println!("{}", format_reports(&reports, ReportFormat::Csv));
    println!("{}", reports[0].1.to_json());
    Ok(())
}
