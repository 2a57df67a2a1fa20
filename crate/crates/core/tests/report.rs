use std::collections::BTreeMap;

use poselift::accounting::{count_macs, MacConvention};
use poselift::metrics::{ActionMetrics, MetricsReport};
use poselift::model::{ModelConfig, Variant};
use poselift::report::{per_action_csv, per_joint_csv, write_cost, write_metrics};

fn sample() -> MetricsReport {
    let mut per_action = BTreeMap::new();
    per_action.insert("walk".to_string(), ActionMetrics { mpjpe_mm: 5.0, p_mpjpe_mm: 4.0, frames: 10 });
    per_action.insert("sit, slowly".to_string(), ActionMetrics { mpjpe_mm: 15.0, p_mpjpe_mm: 9.0, frames: 30 });
    MetricsReport {
        mpjpe_mm: 12.5,
        p_mpjpe_mm: 7.75,
        pck_pct: 98.0,
        auc_pct: 80.0,
        accel_err_mm: 1.5,
        frames: 40,
        sequences: 2,
        per_joint: vec![0.0, 20.0, 17.5],
        per_action,
    }
}

#[test]
fn two_actions_give_two_rows() {
    let csv = per_action_csv(&sample());
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines.len(), 3);
    assert_eq!(lines[0], "action,frames,mpjpe_mm,p_mpjpe_mm");
    assert_eq!(lines[1], "\"sit, slowly\",30,15,9");
    let joints = per_joint_csv(&sample(), &["root".into(), "hip".into()]);
    assert_eq!(joints.lines().nth(3), Some("2,2,17.5"));
}

#[test]
fn json_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let files = write_metrics(&sample(), &[], dir.path(), "eval").unwrap();
    assert_eq!(files.len(), 3);
    let back: MetricsReport = serde_json::from_str(&std::fs::read_to_string(&files[0]).unwrap()).unwrap();
    assert_eq!(back, sample());

    let cost = count_macs(&ModelConfig::variant(Variant::XS), MacConvention::Layers);
    let files = write_cost(&cost, dir.path(), "cost").unwrap();
    let back: poselift::accounting::CostReport =
        serde_json::from_str(&std::fs::read_to_string(&files[0]).unwrap()).unwrap();
    assert_eq!(back, cost);
    let rows = std::fs::read_to_string(&files[1]).unwrap().lines().count();
    assert_eq!(rows, cost.breakdown.len() + 1);
}

#[test]
fn unwritable_directory_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    let blocker = dir.path().join("file");
    std::fs::write(&blocker, "x").unwrap();
    assert!(write_metrics(&sample(), &[], &blocker.join("sub"), "eval").is_err());
}
