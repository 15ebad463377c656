//! Peak-picking NMS against IoU NMS on synthetic tie-free heatmaps. Both
//! modes must return identical detections before anything is timed.

use saccade::bench::run_nms_bench;

fn main() -> saccade::Result<()> {
    let report = run_nms_bench(&[32, 64, 128], &[5, 20, 50], 30, 0)?;
    print!("{}", report.table());
    Ok(())
}
