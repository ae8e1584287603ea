//! Temporary pilot for the quantile coverage cell.

use drband::simulation::{run_coverage_with, BandMethod, CellSpec, Dgp, SimProtocol};
use drband::Loss;

#[test]
fn probe_quantile_cell() {
    let proto = SimProtocol::default();
    let cells = [CellSpec {
        dgp: Dgp::Dgp0,
        n: 400,
        loss: Loss::quantile(0.45).unwrap(),
    }];
    let report = run_coverage_with(&cells, &proto, BandMethod::Undersmooth).unwrap();
    for row in &report.rows {
        println!(
            "K: method={} level={} rate={:.3} width={:.3} completed={} failed={}",
            row.method, row.level, row.rate, row.mean_width, row.reps_completed, row.reps_failed
        );
    }
}
