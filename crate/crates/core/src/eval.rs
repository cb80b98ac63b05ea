//! Evaluation metrics (F1, Hit, H@1), the per-question report, a concurrent
//! evaluation driver, and the propagation-range benchmark.

use std::collections::HashSet;
use std::hash::Hash;
use std::time::Instant;

use serde::Serialize;
use thiserror::Error;

use crate::kg::{KnowledgeGraph, QuestionInstance};
use crate::propagation::{structural_reach, ExpansionSources, PropError, LAMBDA_UNLIMITED};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("question {index}: {message}")]
    Question { index: usize, message: String },
    #[error(transparent)]
    Prop(#[from] PropError),
}

/// Set-based F1 of predictions against gold answers. Duplicated predictions
/// count once. Both sides empty is a vacuously perfect match (1.0).
pub fn metric_f1<T: Eq + Hash>(pred: &[T], gold: &HashSet<T>) -> f64 {
    let unique: HashSet<&T> = pred.iter().collect();
    if unique.is_empty() && gold.is_empty() {
        return 1.0;
    }
    if unique.is_empty() || gold.is_empty() {
        return 0.0;
    }
    let correct = unique.iter().filter(|p| gold.contains(**p)).count() as f64;
    if correct == 0.0 {
        return 0.0;
    }
    let precision = correct / unique.len() as f64;
    let recall = correct / gold.len() as f64;
    2.0 * precision * recall / (precision + recall)
}

/// At least one prediction is correct.
pub fn metric_hit<T: Eq + Hash>(pred: &[T], gold: &HashSet<T>) -> bool {
    pred.iter().any(|p| gold.contains(p))
}

/// The first prediction is correct.
pub fn metric_h1<T: Eq + Hash>(pred: &[T], gold: &HashSet<T>) -> bool {
    pred.first().is_some_and(|p| gold.contains(p))
}

/// One evaluated question.
#[derive(Clone, Debug, Serialize)]
pub struct QuestionResult {
    pub question: String,
    pub predicted: Vec<String>,
    pub gold: Vec<String>,
    pub f1: f64,
    pub hit: bool,
    pub h1: bool,
}

/// Per-question rows plus macro-averaged aggregates.
#[derive(Clone, Debug, Serialize)]
pub struct EvalReport {
    pub per_question: Vec<QuestionResult>,
    pub mean_f1: f64,
    pub hit_rate: f64,
    pub h1_rate: f64,
    pub count: usize,
}

impl EvalReport {
    pub fn from_results(per_question: Vec<QuestionResult>) -> Self {
        let count = per_question.len();
        let denom = count.max(1) as f64;
        let mean_f1 = per_question.iter().map(|r| r.f1).sum::<f64>() / denom;
        let hit_rate = per_question.iter().filter(|r| r.hit).count() as f64 / denom;
        let h1_rate = per_question.iter().filter(|r| r.h1).count() as f64 / denom;
        Self {
            per_question,
            mean_f1,
            hit_rate,
            h1_rate,
            count,
        }
    }
}

/// Scores one prediction list against a question's gold answers.
pub fn score_question(
    g: &KnowledgeGraph,
    question: &QuestionInstance,
    predicted: Vec<String>,
) -> QuestionResult {
    let gold: Vec<String> = question
        .answers
        .iter()
        .map(|a| g.entity_label(*a).unwrap_or("?").to_owned())
        .collect();
    let gold_set: HashSet<String> = gold.iter().cloned().collect();
    QuestionResult {
        question: question.text.clone(),
        f1: metric_f1(&predicted, &gold_set),
        hit: metric_hit(&predicted, &gold_set),
        h1: metric_h1(&predicted, &gold_set),
        predicted,
        gold,
    }
}

/// Runs `answer` over every question, up to `workers` at a time, and returns
/// the report in input order regardless of completion order.
pub fn evaluate<A>(
    g: &KnowledgeGraph,
    questions: &[QuestionInstance],
    workers: usize,
    answer: A,
) -> Result<EvalReport, EvalError>
where
    A: Fn(usize, &QuestionInstance) -> Result<Vec<String>, String> + Sync,
{
    let workers = workers.max(1);
    let mut results: Vec<Option<QuestionResult>> = vec![None; questions.len()];
    let next = std::sync::atomic::AtomicUsize::new(0);
    let slots = std::sync::Mutex::new(&mut results);

    std::thread::scope(|scope| -> Result<(), EvalError> {
        let mut handles = Vec::new();
        for _ in 0..workers.min(questions.len().max(1)) {
            handles.push(scope.spawn(|| -> Result<(), EvalError> {
                loop {
                    let index = next.fetch_add(1, std::sync::atomic::Ordering::Relaxed);
                    if index >= questions.len() {
                        return Ok(());
                    }
                    let question = &questions[index];
                    let predicted = answer(index, question).map_err(|message| {
                        EvalError::Question { index, message }
                    })?;
                    let row = score_question(g, question, predicted);
                    slots.lock().unwrap()[index] = Some(row);
                }
            }));
        }
        for handle in handles {
            handle.join().expect("eval worker panicked")?;
        }
        Ok(())
    })?;

    Ok(EvalReport::from_results(
        results.into_iter().map(Option::unwrap).collect(),
    ))
}

/// One benchmark configuration's measurements.
#[derive(Clone, Debug, Serialize)]
pub struct BenchRow {
    pub progressive: bool,
    pub pruning: bool,
    /// `None` renders as `inf` (pruning disabled or unlimited).
    pub lambda: Option<usize>,
    pub questions: usize,
    pub mean_entities: f64,
    pub mean_facts: f64,
    pub wall_ms: u128,
    pub exceeded: bool,
}

/// Measures propagation range per configuration: mean reached entities and
/// facts over the questions, and wall-clock time. With pruning enabled one
/// row per `lambda`; otherwise a single unlimited row. `edge_cap` aborts a
/// configuration once any question's edge set exceeds it.
pub fn bench_app(
    g: &KnowledgeGraph,
    questions: &[QuestionInstance],
    hops: usize,
    lambdas: &[usize],
    progressive: bool,
    pruning: bool,
    edge_cap: Option<usize>,
) -> Result<Vec<BenchRow>, EvalError> {
    let sources = if progressive {
        ExpansionSources::Reached
    } else {
        ExpansionSources::AllEntities
    };
    let configs: Vec<Option<usize>> = if pruning {
        lambdas
            .iter()
            .map(|&l| if l == LAMBDA_UNLIMITED { None } else { Some(l) })
            .collect()
    } else {
        vec![None]
    };

    let mut rows = Vec::new();
    for lambda in configs {
        let effective = lambda.unwrap_or(LAMBDA_UNLIMITED);
        let started = Instant::now();
        let mut total_entities = 0usize;
        let mut total_facts = 0usize;
        let mut processed = 0usize;
        let mut exceeded = false;
        for q in questions {
            let reach = structural_reach(g, &q.topics, hops, effective, sources, edge_cap)?;
            total_entities += reach.entities;
            total_facts += reach.facts;
            processed += 1;
            if reach.exceeded {
                exceeded = true;
                break;
            }
        }
        let denom = processed.max(1) as f64;
        rows.push(BenchRow {
            progressive,
            pruning,
            lambda,
            questions: processed,
            mean_entities: total_entities as f64 / denom,
            mean_facts: total_facts as f64 / denom,
            wall_ms: started.elapsed().as_millis(),
            exceeded,
        });
    }
    Ok(rows)
}

/// Fixed-schema CSV for benchmark rows.
pub fn bench_csv(rows: &[BenchRow]) -> String {
    let mut out = String::from("pe,ap,lambda,questions,mean_entities,mean_facts,wall_ms,status\n");
    for row in rows {
        let lambda = row
            .lambda
            .map_or_else(|| "inf".to_owned(), |l| l.to_string());
        let status = if row.exceeded { "exceeded" } else { "ok" };
        out.push_str(&format!(
            "{},{},{},{},{:.2},{:.2},{},{}\n",
            if row.progressive { "on" } else { "off" },
            if row.pruning { "on" } else { "off" },
            lambda,
            row.questions,
            row.mean_entities,
            row.mean_facts,
            row.wall_ms,
            status
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn set(items: &[&str]) -> HashSet<String> {
        items.iter().map(|s| s.to_string()).collect()
    }

    fn preds(items: &[&str]) -> Vec<String> {
        items.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn f1_worked_examples() {
        assert_eq!(metric_f1(&preds(&["A", "B"]), &set(&["A", "B"])), 1.0);
        let partial = metric_f1(&preds(&["A"]), &set(&["A", "B"]));
        assert!((partial - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(metric_f1(&preds(&["C"]), &set(&["A"])), 0.0);
        assert_eq!(metric_f1(&preds(&[]), &set(&["A"])), 0.0);
        assert_eq!(metric_f1(&preds(&[]), &set(&[])), 1.0);
        // duplicates collapse
        assert_eq!(metric_f1(&preds(&["A", "A"]), &set(&["A"])), 1.0);
    }

    #[test]
    fn hit_and_h1_are_order_sensitive() {
        let gold = set(&["A"]);
        assert!(metric_hit(&preds(&["B", "A"]), &gold));
        assert!(!metric_h1(&preds(&["B", "A"]), &gold));
        assert!(metric_h1(&preds(&["A"]), &gold));
        assert!(!metric_hit(&preds(&[]), &gold));
        assert!(!metric_h1(&preds(&[]), &gold));
    }

    #[test]
    fn metrics_match_brute_force_oracle_on_random_cases() {
        let mut state = 0xabcdef_u64;
        let mut next = || {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            (state >> 33) as usize
        };
        let names = ["A", "B", "C", "D", "E", "F"];
        for _ in 0..100 {
            let pred: Vec<String> = (0..next() % 5)
                .map(|_| names[next() % names.len()].to_owned())
                .collect();
            let gold: HashSet<String> = (0..next() % 5)
                .map(|_| names[next() % names.len()].to_owned())
                .collect();

            // oracle: straight set arithmetic
            let pset: HashSet<&String> = pred.iter().collect();
            let inter = pset.iter().filter(|p| gold.contains(**p)).count() as f64;
            let expect_f1 = if pset.is_empty() && gold.is_empty() {
                1.0
            } else if pset.is_empty() || gold.is_empty() || inter == 0.0 {
                0.0
            } else {
                let p = inter / pset.len() as f64;
                let r = inter / gold.len() as f64;
                2.0 * p * r / (p + r)
            };
            assert_eq!(metric_f1(&pred, &gold), expect_f1);
            assert_eq!(metric_hit(&pred, &gold), inter > 0.0);
            assert_eq!(
                metric_h1(&pred, &gold),
                pred.first().map(|f| gold.contains(f)).unwrap_or(false)
            );
        }
    }

    #[test]
    fn report_aggregates_are_means() {
        let rows = vec![
            QuestionResult {
                question: "a".into(),
                predicted: vec!["x".into()],
                gold: vec!["x".into()],
                f1: 1.0,
                hit: true,
                h1: true,
            },
            QuestionResult {
                question: "b".into(),
                predicted: vec![],
                gold: vec!["y".into()],
                f1: 0.0,
                hit: false,
                h1: false,
            },
        ];
        let report = EvalReport::from_results(rows);
        assert_eq!(report.count, 2);
        assert!((report.mean_f1 - 0.5).abs() < 1e-12);
        assert!((report.hit_rate - 0.5).abs() < 1e-12);
        assert!((report.h1_rate - 0.5).abs() < 1e-12);
    }

    #[test]
    fn evaluate_preserves_input_order_under_concurrency() {
        let g = KnowledgeGraph::parse_triples("A\tr\tB\nB\tr\tC\nC\tr\tD\n", "test")
            .unwrap()
            .augment_inverse()
            .unwrap();
        let questions: Vec<QuestionInstance> = ["B", "C", "D", "B", "C"]
            .iter()
            .enumerate()
            .map(|(i, answer)| QuestionInstance {
                text: format!("q{i}"),
                topics: vec![g.entity_by_label("A").unwrap()],
                answers: vec![g.entity_by_label(answer).unwrap()],
                candidates: None,
            })
            .collect();
        let report = evaluate(&g, &questions, 4, |index, _q| {
            // deliberately uneven work so completion order scrambles
            std::thread::sleep(std::time::Duration::from_millis(
                ((questions.len() - index) * 3) as u64,
            ));
            Ok(vec![["B", "C", "D", "B", "C"][index].to_string()])
        })
        .unwrap();
        assert_eq!(report.count, 5);
        assert_eq!(report.h1_rate, 1.0);
        for (i, row) in report.per_question.iter().enumerate() {
            assert_eq!(row.question, format!("q{i}"));
        }
    }

    #[test]
    fn bench_rows_and_csv_schema() {
        let mut text = String::new();
        for i in 0..30 {
            text.push_str(&format!("hub\tr\tn{i}\n"));
        }
        text.push_str("hub\ts\tn0\n");
        let g = KnowledgeGraph::parse_triples(&text, "test")
            .unwrap()
            .augment_inverse()
            .unwrap();
        let questions = vec![QuestionInstance {
            text: "q".into(),
            topics: vec![g.entity_by_label("hub").unwrap()],
            answers: vec![],
            candidates: None,
        }];
        let rows = bench_app(&g, &questions, 2, &[1, 10, LAMBDA_UNLIMITED], true, true, None)
            .unwrap();
        assert_eq!(rows.len(), 3);
        // smaller lambda, smaller reach
        assert!(rows[0].mean_facts <= rows[1].mean_facts);
        assert!(rows[1].mean_facts <= rows[2].mean_facts);

        // unlimited lambda with pruning on equals pruning off
        let off = bench_app(&g, &questions, 2, &[], true, false, None).unwrap();
        assert_eq!(off.len(), 1);
        assert_eq!(off[0].mean_facts, rows[2].mean_facts);
        assert_eq!(off[0].mean_entities, rows[2].mean_entities);

        let csv = bench_csv(&rows);
        let mut lines = csv.lines();
        assert_eq!(
            lines.next().unwrap(),
            "pe,ap,lambda,questions,mean_entities,mean_facts,wall_ms,status"
        );
        assert_eq!(csv.lines().count(), 4);
        assert!(csv.contains("inf"));
    }
}
