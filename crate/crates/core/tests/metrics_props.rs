mod common;

use common::{init, toy, toy_config};
use fairmeta::metrics::{self, counterfactual_gap, group_gap, MetricsError, MetricsReport};
use fairmeta::model::{expected_ratings, ModelLayout};
use fairmeta::trainer::{finetune_test, Mode};
use proptest::prelude::*;

#[test]
fn attribute_blind_model_has_zero_counterfactual_gap() {
    let data = toy(60, 0.75, 20);
    let mut meta = init(&data, 4);
    meta.make_attribute_blind();
    let cfg = toy_config(Mode::Clover, 1);
    for task in &data.tasks.test {
        let adapted = finetune_test(&meta, task.support_view(), &cfg).unwrap();
        assert_eq!(counterfactual_gap(&adapted, task, false).unwrap(), 0.0);
        assert_eq!(counterfactual_gap(&adapted, task, true).unwrap(), 0.0);
    }
    let report = metrics::evaluate(&meta, &data.tasks, &cfg).unwrap();
    assert_eq!(report.cf, 0.0);
}

#[test]
fn fresh_model_report_is_finite_and_reaggregates() {
    let data = toy(80, 0.75, 21);
    let report = metrics::evaluate(&init(&data, 0), &data.tasks, &toy_config(Mode::Melu, 1)).unwrap();
    assert_eq!(report.users, data.tasks.test.len());
    for v in report.headline_values().iter().flatten() {
        assert!(v.is_finite());
    }
    let n = report.per_user.len() as f64;
    let mean = |f: fn(&metrics::UserRow) -> f64| report.per_user.iter().map(f).sum::<f64>() / n;
    assert!((mean(|r| r.mae) - report.mae).abs() < 1e-9);
    assert!((mean(|r| r.ndcg) - report.ndcg3).abs() < 1e-9);
    assert!((mean(|r| r.cf) - report.cf).abs() < 1e-9);
    let groups: Vec<(f64, usize)> = report.per_user.iter().map(|r| (r.mae, r.group)).collect();
    assert!((group_gap(&groups).unwrap() - report.gf.unwrap()).abs() < 1e-9);
    let users: Vec<usize> = report.per_user.iter().map(|r| r.user).collect();
    assert!(users.windows(2).all(|w| w[0] < w[1]));
}

#[test]
fn json_and_csv_headlines_agree() {
    let data = toy(60, 0.75, 22);
    let report = metrics::evaluate(&init(&data, 0), &data.tasks, &toy_config(Mode::Melu, 1)).unwrap();
    let back: MetricsReport = serde_json::from_str(&report.to_json()).unwrap();
    let csv = report.headline_csv();
    let mut lines = csv.lines();
    assert_eq!(lines.next().unwrap(), MetricsReport::HEADLINE.join(","));
    let row: Vec<f64> = lines.next().unwrap().split(',').map(|v| v.parse().unwrap()).collect();
    for (a, b) in row.iter().zip(back.headline_values()) {
        assert!((a - b.unwrap()).abs() < 1e-9);
    }
}

#[test]
fn empty_test_split_is_an_error() {
    let mut data = toy(40, 0.75, 23);
    data.tasks.test.clear();
    let err = metrics::evaluate(&init(&data, 0), &data.tasks, &toy_config(Mode::Melu, 1)).unwrap_err();
    assert!(matches!(err, MetricsError::Contract(_)));
}

fn five_levels() -> ModelLayout {
    ModelLayout {
        user_blocks: vec![],
        item_blocks: vec![],
        sensitive_block: 0,
        rating_min: 1,
        rating_levels: 5,
        sensitive_classes: 2,
    }
}

proptest! {
    #[test]
    fn expected_rating_grows_with_the_top_class_logit(
        logits in prop::collection::vec(-10.0f64..10.0, 5),
        shift in 0.01f64..5.0,
    ) {
        let layout = five_levels();
        let base = expected_ratings(&layout, &logits)[0];
        let mut raised = logits.clone();
        raised[4] += shift;
        let up = expected_ratings(&layout, &raised)[0];
        prop_assert!(up >= base);
        prop_assert!((1.0..=5.0).contains(&base));
    }
}
