//! Acceptance gate. Runs every criterion, prints one PASS/FAIL line each and
//! exits non-zero if any criterion fails.

use std::collections::HashMap;
use std::process::ExitCode;
use std::time::Instant;

use rayon::prelude::*;

use fedhpro::data::{
    generate_blobs, longtail_counts, make_longtail, partition_nid1, partition_nid2, NID2_BIASED, NID2_CLIENTS,
};
use fedhpro::experiment::{Experiment, Preset};
use fedhpro::gradcheck::{run_all, GradcheckConfig};
use fedhpro::hyperproto::{gm_loss, HyperPrototypes};
use fedhpro::losses::{client_margin, hpal_loss, hpcl_loss, Strategy};
use fedhpro::metrics::{records_to_csv, RoundRecord};
use fedhpro::numerics::{Matrix, SimRng};
use fedhpro::prototypes::LocalPrototypes;

const SEEDS: [u64; 3] = [1, 2, 3];

struct Verdict {
    id: u32,
    name: &'static str,
    passed: bool,
    detail: String,
}

/// Finished runs of one (scenario, strategy) pair over all seeds, plus the
/// wall time of running them.
struct Batch {
    runs: Vec<Vec<RoundRecord>>,
    seconds: f64,
}

#[derive(Default)]
struct Runs(HashMap<(&'static str, Strategy), Batch>);

impl Runs {
    fn ensure(&mut self, label: &'static str, exp: &Experiment, strategies: &[Strategy]) {
        for &s in strategies {
            let t = Instant::now();
            let runs = SEEDS
                .par_iter()
                .map(|&seed| exp.run_cell(s, seed, 1, |_| {}).expect("run completes").records)
                .collect();
            let seconds = t.elapsed().as_secs_f64();
            self.0.insert((label, s), Batch { runs, seconds });
        }
    }

    fn cells(&self, label: &'static str, s: Strategy) -> &[Vec<RoundRecord>] {
        &self.0[&(label, s)].runs
    }

    fn accuracies(&self, label: &'static str, s: Strategy) -> Vec<f64> {
        self.cells(label, s)
            .iter()
            .map(|r| r.last().unwrap().test_accuracy)
            .collect()
    }

    fn mean_accuracy(&self, label: &'static str, s: Strategy) -> f64 {
        mean(&self.accuracies(label, s))
    }

    fn seconds(&self, label: &'static str, strategies: &[Strategy]) -> f64 {
        strategies.iter().map(|&s| self.0[&(label, s)].seconds).sum()
    }
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

fn pct(xs: &[f64]) -> String {
    xs.iter()
        .map(|a| format!("{:.2}", 100.0 * a))
        .collect::<Vec<_>>()
        .join("/")
}

fn nid1(alpha: f64) -> Experiment {
    let mut e = Experiment::preset(Preset::Nid1);
    e.alpha = alpha;
    e
}

fn gradient_correctness() -> Verdict {
    let t = Instant::now();
    let reports = run_all(&GradcheckConfig::default()).expect("gradcheck runs");
    let secs = t.elapsed().as_secs_f64();
    let ok = reports.iter().all(|r| r.passed() && r.instances == 100);
    let worst = reports.iter().map(|r| r.max_rel_error).fold(0.0, f64::max);
    let failures: usize = reports.iter().map(|r| r.failures).sum();
    Verdict {
        id: 1,
        name: "gradient correctness",
        passed: ok && secs < 30.0,
        detail: format!("{failures} failing coordinates, max rel err {worst:.2e}, {secs:.1}s (limit 30s)"),
    }
}

fn gm_convergence(runs: &Runs) -> Verdict {
    let ratios: Vec<f64> = runs
        .cells("nid1", Strategy::FedHPro)
        .iter()
        .map(|c| {
            let gm: Vec<f64> = c.iter().map(|r| r.gm_loss.unwrap_or(f64::NAN)).collect();
            mean(&gm[20..30]) / mean(&gm[0..5])
        })
        .collect();
    let hits = ratios.iter().filter(|&&r| r < 0.5).count();
    let secs = runs.seconds("nid1", &[Strategy::FedHPro]);
    Verdict {
        id: 2,
        name: "gradient-matching convergence",
        passed: hits >= 2 && secs < 120.0,
        detail: format!(
            "late/early ratios {} ({hits}/3 below 0.5), {secs:.1}s (limit 120s)",
            ratios.iter().map(|r| format!("{r:.3}")).collect::<Vec<_>>().join("/")
        ),
    }
}

fn hyperprototype_proximity(runs: &Runs) -> Verdict {
    let pairs: Vec<(f64, f64)> = runs
        .cells("domain2", Strategy::FedHPro)
        .iter()
        .map(|c| {
            let last = c.last().unwrap();
            (
                last.hyper_l2_mean.unwrap_or(f64::NAN),
                last.proto_l2_mean.unwrap_or(f64::NAN),
            )
        })
        .collect();
    let hits = pairs.iter().filter(|(h, p)| h < p).count();
    Verdict {
        id: 3,
        name: "hyper-prototype proximity",
        passed: hits >= 2,
        detail: format!(
            "|H-cen| vs |P-cen| per seed {} ({hits}/3 with H closer)",
            pairs
                .iter()
                .map(|(h, p)| format!("{h:.3} vs {p:.3}"))
                .collect::<Vec<_>>()
                .join(" ")
        ),
    }
}

fn directional_superiority(runs: &Runs) -> Verdict {
    let hp = runs.mean_accuracy("nid1", Strategy::FedHPro);
    let avg = runs.mean_accuracy("nid1", Strategy::FedAvg);
    let secs = runs.seconds("nid1", &[Strategy::FedHPro, Strategy::FedAvg]);
    Verdict {
        id: 4,
        name: "directional superiority",
        passed: 100.0 * (hp - avg) >= 1.0 && secs < 300.0,
        detail: format!(
            "fedhpro {:.2} vs fedavg {:.2} (delta {:+.2}, need >= +1.00), {secs:.1}s (limit 300s)",
            100.0 * hp,
            100.0 * avg,
            100.0 * (hp - avg)
        ),
    }
}

fn plug_in_improvement(runs: &Runs) -> Verdict {
    let hp = runs.accuracies("nid1", Strategy::FedProtoHp);
    let base = runs.accuracies("nid1", Strategy::FedProto);
    let hits = hp.iter().zip(&base).filter(|(a, b)| a >= b).count();
    Verdict {
        id: 5,
        name: "plug-in improvement",
        passed: hits >= 2,
        detail: format!("fedproto-hp {} vs fedproto {} ({hits}/3 seeds)", pct(&hp), pct(&base)),
    }
}

fn ablation_ordering(runs: &Runs) -> Verdict {
    let full = 100.0 * runs.mean_accuracy("nid1", Strategy::FedHPro);
    let no_hpcl = 100.0 * runs.mean_accuracy("nid1", Strategy::FedHProNoHpcl);
    let no_hpal = 100.0 * runs.mean_accuracy("nid1", Strategy::FedHProNoHpal);
    let avg = 100.0 * runs.mean_accuracy("nid1", Strategy::FedAvg);
    let best_ablation = no_hpcl.max(no_hpal);
    let first = full - best_ablation;
    let second = best_ablation - avg;
    Verdict {
        id: 6,
        name: "module ablation ordering",
        passed: first >= -0.5 && second >= -0.5,
        detail: format!(
            "full {full:.2}, no-hpcl {no_hpcl:.2}, no-hpal {no_hpal:.2}, fedavg {avg:.2} (margins {first:+.2}, {second:+.2}; slack -0.50)"
        ),
    }
}

fn partitioner_exactness() -> Verdict {
    let mut problems = Vec::new();
    let mut rng = SimRng::new(7, 0);

    let counts = longtail_counts(10, 500, 100.0);
    let big = generate_blobs(10, 500, 4, 1.0, &mut rng).unwrap();
    let tail = make_longtail(&big, 100.0).unwrap().class_counts();
    if counts[0] != 500 || counts[9] != 5 || tail[0] != 500 || tail[9] != 5 {
        problems.push(format!("long-tail extremes {:?}", tail));
    }

    let ds = generate_blobs(10, 200, 4, 1.0, &mut rng).unwrap();
    let parts = partition_nid2(&ds, &mut rng).unwrap();
    if parts.len() != NID2_CLIENTS {
        problems.push(format!("nid2 produced {} clients", parts.len()));
    }
    for (k, p) in parts.iter().take(NID2_BIASED).enumerate() {
        let present: Vec<usize> = p
            .class_counts()
            .iter()
            .enumerate()
            .filter(|(_, &n)| n > 0)
            .map(|(c, _)| c)
            .collect();
        if present != vec![k] {
            problems.push(format!("nid2 client {k} holds classes {present:?}"));
        }
    }
    let last = parts.last().unwrap().class_counts();
    if last.contains(&0) {
        problems.push(format!("nid2 mixed client counts {last:?}"));
    }
    let nid2_total: Vec<usize> = (0..10)
        .map(|c| parts.iter().map(|p| p.class_counts()[c]).sum())
        .collect();
    if nid2_total != ds.class_counts() {
        problems.push("nid2 lost samples".into());
    }

    for &alpha in &[0.1, 0.5, 1e6] {
        let shards = partition_nid1(&ds, 10, alpha, &mut rng).unwrap();
        let mut rows: Vec<(Vec<u64>, usize)> = shards
            .iter()
            .flat_map(|s| (0..s.len()).map(move |i| (s.x(i).iter().map(|v| v.to_bits()).collect(), s.y(i))))
            .collect();
        let mut want: Vec<(Vec<u64>, usize)> = (0..ds.len())
            .map(|i| (ds.x(i).iter().map(|v| v.to_bits()).collect(), ds.y(i)))
            .collect();
        rows.sort();
        want.sort();
        if rows != want {
            problems.push(format!("nid1 alpha {alpha} does not conserve samples"));
        }
    }

    Verdict {
        id: 7,
        name: "partitioner exactness",
        passed: problems.is_empty(),
        detail: if problems.is_empty() {
            "long-tail 500..5, nid2 7 clients (6 single-class), nid1 conserves samples".into()
        } else {
            problems.join("; ")
        },
    }
}

fn formula_oracles() -> Verdict {
    let mut errs = Vec::new();
    let mut check = |what: &str, got: f64, want: f64| {
        if (got - want).abs() > 1e-9 {
            errs.push(format!("{what}: {got} != {want}"));
        }
    };

    let g = [0.3, -1.2, 2.0];
    check("gm identical", gm_loss(&g, &g).unwrap(), 0.0);
    check(
        "gm orthogonal",
        gm_loss(&[1.0, 0.0, 0.0], &[0.0, 2.0, 0.0]).unwrap(),
        1.0,
    );
    check("gm opposite", gm_loss(&g, &[-0.6, 2.4, -4.0]).unwrap(), 2.0);

    let locals = LocalPrototypes::new(
        Matrix::from_rows(&[vec![0.0, 0.0], vec![3.0, 4.0]]).unwrap(),
        vec![1, 1],
    )
    .unwrap();
    check("margin", client_margin(&locals, 2), 10.0);

    let bank = HyperPrototypes::from_vec(2, 1, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
    let (hpcl, _) = hpcl_loss(&[1.0, 0.0], 0, &bank, 0.0, 1.0).unwrap();
    check("hpcl", hpcl, (1.0 + (-1.0f64).exp()).ln());

    let h = Matrix::from_rows(&[vec![1.0, -1.0]]).unwrap();
    let (hpal, _) = hpal_loss(&[1.5, 1.0], 0, &h).unwrap();
    check("hpal", hpal, 1.625);

    Verdict {
        id: 8,
        name: "formula oracles",
        passed: errs.is_empty(),
        detail: if errs.is_empty() {
            "matching 0/1/2, margin 10, contrastive log(1+e^-1), alignment 1.625 (tol 1e-9)".into()
        } else {
            errs.join("; ")
        },
    }
}

fn determinism() -> Verdict {
    let mut problems = Vec::new();
    for preset in Preset::ALL {
        let mut exp = Experiment::preset(preset);
        exp.federation.rounds = 3;
        let csv = |workers: usize| {
            let outcome = exp
                .run_cell(Strategy::FedHPro, 11, workers, |_| {})
                .expect("run completes");
            records_to_csv(&outcome.records).unwrap()
        };
        let a = csv(1);
        let b = csv(1);
        let c = csv(8);
        if a != b {
            problems.push(format!("{preset}: repeated runs differ"));
        }
        if a != c {
            problems.push(format!("{preset}: 1 vs 8 workers differ"));
        }
    }
    Verdict {
        id: 9,
        name: "determinism",
        passed: problems.is_empty(),
        detail: if problems.is_empty() {
            format!(
                "{} presets byte-identical across repeats and 1 vs 8 workers",
                Preset::ALL.len()
            )
        } else {
            problems.join("; ")
        },
    }
}

fn iid_no_harm(runs: &Runs) -> Verdict {
    let hp = runs.mean_accuracy("iid", Strategy::FedHPro);
    let avg = runs.mean_accuracy("iid", Strategy::FedAvg);
    let gap = 100.0 * (hp - avg).abs();
    Verdict {
        id: 10,
        name: "IID no-harm",
        passed: gap < 3.0,
        detail: format!(
            "fedhpro {:.2} vs fedavg {:.2} (|delta| {gap:.2}, need < 3.00)",
            100.0 * hp,
            100.0 * avg
        ),
    }
}

fn main() -> ExitCode {
    // libtest flags such as --nocapture or a name filter are accepted and ignored
    let started = Instant::now();
    let mut verdicts = vec![gradient_correctness()];

    let mut runs = Runs::default();
    runs.ensure(
        "nid1",
        &nid1(0.5),
        &[
            Strategy::FedAvg,
            Strategy::FedHPro,
            Strategy::FedHProNoHpcl,
            Strategy::FedHProNoHpal,
            Strategy::FedProto,
            Strategy::FedProtoHp,
        ],
    );
    runs.ensure("domain2", &Experiment::preset(Preset::Domain2), &[Strategy::FedHPro]);
    runs.ensure("iid", &nid1(1e6), &[Strategy::FedAvg, Strategy::FedHPro]);

    verdicts.push(gm_convergence(&runs));
    verdicts.push(hyperprototype_proximity(&runs));
    verdicts.push(directional_superiority(&runs));
    verdicts.push(plug_in_improvement(&runs));
    verdicts.push(ablation_ordering(&runs));
    verdicts.push(partitioner_exactness());
    verdicts.push(formula_oracles());
    verdicts.push(determinism());
    verdicts.push(iid_no_harm(&runs));

    println!();
    for v in &verdicts {
        let tag = if v.passed { "PASS" } else { "FAIL" };
        println!("[{tag}] criterion {:>2} {:<30} {}", v.id, v.name, v.detail);
    }
    let failed = verdicts.iter().filter(|v| !v.passed).count();
    println!(
        "\nacceptance: {}/{} criteria passed in {:.1}s",
        verdicts.len() - failed,
        verdicts.len(),
        started.elapsed().as_secs_f64()
    );
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
