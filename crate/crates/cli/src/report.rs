//! Report files: `split.class.metric=value` text, JSON summary, per-class
//! CSV and the loss curve.

use std::fmt::Write as _;

use ovd_core::metrics::{ClassReport, EvalReport, SplitMetrics};
use ovd_core::model::StepRecord;
use ovd_core::text::ClassRole;
use serde_json::{json, Value};

fn role(r: ClassRole) -> &'static str {
    match r {
        ClassRole::Base => "base",
        ClassRole::Novel => "novel",
    }
}

fn key(name: &str) -> String {
    name.replace(' ', "_")
}

fn value(x: Option<f64>) -> String {
    match x {
        Some(v) => format!("{v:.6}"),
        None => "undefined".into(),
    }
}

fn split_lines(out: &mut String, split: &str, m: &SplitMetrics) {
    let _ = writeln!(out, "{split}.all.ap50={:.6}", m.ap50);
    let _ = writeln!(out, "{split}.all.map={:.6}", m.map);
    let _ = writeln!(out, "{split}.all.recall={:.6}", m.recall);
    let _ = writeln!(out, "{split}.all.recall_micro={:.6}", m.recall_micro);
    let _ = writeln!(out, "{split}.all.classes={}", m.classes_scored);
}

pub fn text_report(r: &EvalReport) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "protocol={}", r.protocol.as_str());
    split_lines(&mut out, "overall", &r.overall);
    for (name, m) in [("base", &r.base), ("novel", &r.novel), ("hm", &r.hm)] {
        if let Some(m) = m {
            split_lines(&mut out, name, m);
        }
    }
    for c in &r.classes {
        let p = format!("{}.{}", role(c.role), key(&c.name));
        let _ = writeln!(out, "{p}.num_gt={}", c.num_gt);
        let _ = writeln!(out, "{p}.ap50={}", value(c.ap50));
        let _ = writeln!(out, "{p}.recall={}", value(c.recall50));
        let _ = writeln!(out, "{p}.map={}", value(c.map));
    }
    out
}

fn split_json(m: &SplitMetrics) -> Value {
    json!({
        "ap50": m.ap50,
        "map": m.map,
        "recall": m.recall,
        "recall_micro": m.recall_micro,
        "classes_scored": m.classes_scored,
    })
}

pub fn json_summary(r: &EvalReport, detections: usize, images: usize) -> String {
    let opt = |m: &Option<SplitMetrics>| m.as_ref().map(split_json).unwrap_or(Value::Null);
    let v = json!({
        "protocol": r.protocol.as_str(),
        "iou_thresholds": r.iou_thresholds,
        "images": images,
        "detections": detections,
        "overall": split_json(&r.overall),
        "base": opt(&r.base),
        "novel": opt(&r.novel),
        "hm": opt(&r.hm),
    });
    let mut s = serde_json::to_string_pretty(&v).expect("json");
    s.push('\n');
    s
}

pub fn class_csv(r: &EvalReport) -> String {
    let mut out = String::from("class,role,num_gt,ap50,recall50,map");
    for t in &r.iou_thresholds {
        let _ = write!(out, ",ap@{t:.2}");
    }
    out.push('\n');
    let cell = |x: Option<f64>| x.map(|v| format!("{v:.6}")).unwrap_or_default();
    for c in &r.classes {
        let ClassReport { name, role: rl, num_gt, ap50, recall50, map, .. } = c;
        let _ = write!(out, "{name},{},{num_gt},{},{},{}", role(*rl), cell(*ap50), cell(*recall50), cell(*map));
        for a in &c.ap_per_threshold {
            if *num_gt > 0 {
                let _ = write!(out, ",{a:.6}");
            } else {
                out.push(',');
            }
        }
        out.push('\n');
    }
    out
}

pub const LOSS_HEADER: &str = "step,total,con,giou,l1,grad_norm\n";

pub fn loss_row(r: &StepRecord) -> String {
    format!(
        "{},{:.9e},{:.9e},{:.9e},{:.9e},{:.9e}\n",
        r.step, r.loss.total, r.loss.l_con, r.loss.l_giou, r.loss.l_l1, r.grad_norm
    )
}
