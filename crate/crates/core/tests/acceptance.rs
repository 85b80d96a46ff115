//! End-to-end acceptance run: trains the full-size experiments (cached under
//! `GROKLAB_ACCEPTANCE_CACHE`, default `<target tmp>/acceptance`) and prints
//! one PASS/FAIL line per criterion. Set `GROKLAB_ACCEPTANCE_STRICT=1` to turn
//! any FAIL into a test failure.

mod common;

use std::io::Write;
use std::path::PathBuf;
use std::time::Instant;

use grokking_lab::detectors::{lead_lag, FireSummary};
use grokking_lab::model::Activation;
use grokking_lab::stats::median;
use grokking_lab::store::StoredRun;
use grokking_lab::sweeps::{run_sweep, Axes, RunEntry, SweepOptions, SweepSpec};
use grokking_lab::thm6::{self, VerifyConfig};
use grokking_lab::trainer::{RunConfig, RELU_CHECKPOINTS, SQUARE_CHECKPOINTS};

const GROK_ETA: f64 = 2e-4;

fn cache_root() -> PathBuf {
    std::env::var_os("GROKLAB_ACCEPTANCE_CACHE")
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("acceptance"))
}

fn say(line: &str) {
    // bypasses libtest capture so the lines land in the test log
    let mut err = std::io::stderr();
    let _ = writeln!(err, "{line}");
}

fn sweep(name: &str, base: RunConfig, axes: Axes) -> Vec<RunEntry> {
    let spec = SweepSpec {
        name: name.into(),
        base,
        axes,
        budget: 1,
        verify: None,
    };
    let t0 = Instant::now();
    let entries = run_sweep(&spec, &cache_root(), &SweepOptions::default(), &|e| {
        say(&format!(
            "  [{name}] {} seed {}: {}",
            e.cell,
            e.seed,
            if e.done() { if e.resumed { "cached" } else { "trained" } } else { "FAILED" }
        ))
    })
    .expect("sweep spec is valid");
    say(&format!("  [{name}] {} runs in {:.0} s", entries.len(), t0.elapsed().as_secs_f64()));
    entries
}

struct Cells {
    grok: Vec<RunEntry>,
    control: Vec<RunEntry>,
}

fn split(entries: Vec<RunEntry>) -> Cells {
    let (grok, control): (Vec<_>, Vec<_>) = entries.into_iter().partition(|e| e.config.eta > 0.0);
    Cells { grok, control }
}

fn fires(entries: &[RunEntry]) -> Result<Vec<&FireSummary>, String> {
    entries
        .iter()
        .map(|e| {
            e.fires
                .as_ref()
                .ok_or_else(|| format!("{} seed {} failed: {}", e.cell, e.seed, e.error.as_deref().unwrap_or("?")))
        })
        .collect()
}

fn list<T: std::fmt::Debug>(v: impl IntoIterator<Item = T>) -> String {
    let items: Vec<String> = v.into_iter().map(|x| format!("{x:?}")).collect();
    format!("[{}]", items.join(", "))
}

fn late_median(f: &[&FireSummary]) -> Option<f64> {
    median(&f.iter().filter_map(|s| s.late_gap23).collect::<Vec<_>>())
}

struct Report {
    lines: Vec<(u8, bool, String)>,
}

impl Report {
    fn record(&mut self, id: u8, result: Result<(bool, String), String>) {
        let (pass, detail) = match result {
            Ok(r) => r,
            Err(e) => (false, format!("error: {e}")),
        };
        let line = format!("criterion {id}: {} | {detail}", if pass { "PASS" } else { "FAIL" });
        say(&line);
        self.lines.push((id, pass, line));
    }
}

fn headline_base() -> RunConfig {
    RunConfig {
        eta: GROK_ETA,
        metric_cadence: 1,
        checkpoint_epochs: SQUARE_CHECKPOINTS.to_vec(),
        ..RunConfig::default()
    }
}

fn criterion_1(h: &Cells) -> Result<(bool, String), String> {
    let g = fires(&h.grok)?;
    let c = fires(&h.control)?;
    let train1: Vec<Option<usize>> = g.iter().map(|f| f.train_acc_1.epoch()).collect();
    let t05: Vec<Option<usize>> = g.iter().map(|f| f.test_crossing(0.5).epoch()).collect();
    let t05_med = median(&t05.iter().flatten().map(|&x| x as f64).collect::<Vec<_>>());
    let ctrl_max: Vec<f64> = c.iter().map(|f| f.max_test_acc).collect();
    let wall: f64 = h
        .grok
        .iter()
        .chain(&h.control)
        .filter_map(|e| StoredRun::load(e.dir.as_ref()?).ok()?.manifest.wall_time_secs)
        .sum();
    let pass = g.len() == 5
        && c.len() == 5
        && train1.iter().all(|t| t.is_some_and(|t| t <= 40))
        && t05.iter().all(Option::is_some)
        && t05_med.is_some_and(|m| (60.0..=160.0).contains(&m))
        && ctrl_max.iter().all(|&m| m < 0.5)
        && wall <= 3600.0;
    Ok((
        pass,
        format!(
            "grok train=1 at {}, test>=0.5 at {} (median {:?}); control max test acc {}; training time {:.0} s",
            list(train1),
            list(t05),
            t05_med,
            list(ctrl_max.iter().map(|x| format!("{x:.3}"))),
            wall
        ),
    ))
}

fn criterion_2(h: &Cells) -> Result<(bool, String), String> {
    let g = fires(&h.grok)?;
    let c = fires(&h.control)?;
    let gf: Vec<Option<usize>> = g.iter().map(|f| f.slope_fire.epoch()).collect();
    let cf: Vec<Option<usize>> = c.iter().map(|f| f.slope_fire.epoch()).collect();
    let lags: Vec<Option<i64>> = g.iter().map(|f| lead_lag(f.slope_fire, f.test_crossing(0.99))).collect();
    let (lg, lc) = (late_median(&g), late_median(&c));
    let sep = match (lg, lc) {
        (Some(a), Some(b)) if b > 0.0 => Some(a / b),
        _ => None,
    };
    let pass = gf.iter().all(|f| f.is_some_and(|t| (140..=220).contains(&t)))
        && cf.iter().all(Option::is_none)
        && sep.is_some_and(|s| s >= 50.0)
        && g.iter().zip(&lags).all(|(f, l)| !f.slope_fire.fired() || l.is_some_and(|l| l > 0));
    Ok((
        pass,
        format!(
            "grok slope fire {}, control {}; late s2/s3 grok {:.1?} control {:.2?} separation {:.1?}x; lag vs test>=0.99 {}",
            list(gf),
            list(cf),
            lg,
            lc,
            sep,
            list(lags)
        ),
    ))
}

fn criterion_3(h: &Cells) -> Result<(bool, String), String> {
    let load = |e: &RunEntry| StoredRun::load(e.dir.as_ref().ok_or("no run dir")?).map_err(|e| e.to_string());
    let grok = load(h.grok.iter().find(|e| e.seed == 0).ok_or("no grok seed 0")?)?;
    let ctrl = load(h.control.iter().find(|e| e.seed == 0).ok_or("no control seed 0")?)?;
    let window = &grok.metrics[200..=300];
    let worst_32 = window.iter().map(|m| m.sigma_w[2] / m.sigma_w[1]).fold(0.0, f64::max);
    let worst_21 = window.iter().map(|m| m.sigma_w[1] / m.sigma_w[0]).fold(f64::INFINITY, f64::min);
    let (c25, c300) = (&ctrl.metrics[25], &ctrl.metrics[300]);
    let decay: Vec<f64> = (0..3).map(|i| c300.sigma_w[i] / c25.sigma_w[i]).collect();
    let pass = worst_32 <= 1e-2 && worst_21 > 1e-4 && decay.iter().all(|&d| d < 1e-2);
    Ok((
        pass,
        format!(
            "grok epochs 200-300: max s3/s2 {worst_32:.2e}, min s2/s1 {worst_21:.2e}; control s1..s3(300)/s(25) {}",
            list(decay.iter().map(|d| format!("{d:.2e}")))
        ),
    ))
}

fn criterion_4(h: &Cells) -> Result<(bool, String), String> {
    let mut pass = true;
    let mut parts = Vec::new();
    let mut slowest = 0.0f64;
    for seed in 0..3 {
        let e = h.grok.iter().find(|e| e.seed == seed).ok_or("missing grok seed")?;
        let run = StoredRun::load(e.dir.as_ref().ok_or("no run dir")?).map_err(|e| e.to_string())?;
        let cfg = VerifyConfig::for_activation(Activation::Square, run.manifest.config.eta);
        let split = run.manifest.config.make_split().map_err(|e| e.to_string())?;
        let mut sm = Vec::new();
        let mut s300 = None;
        let mut audit = None;
        for &epoch in &SQUARE_CHECKPOINTS {
            let t0 = Instant::now();
            let ck = run.checkpoint(epoch).map_err(|e| e.to_string())?;
            let f = thm6::checkpoint_features(&split, &ck.params, Activation::Square).map_err(|e| e.to_string())?;
            let v = thm6::verify_features(f.as_ref(), &cfg, epoch, (epoch == 175).then_some(10)).map_err(|e| e.to_string())?;
            slowest = slowest.max(t0.elapsed().as_secs_f64());
            sm.push(v.report.sign_match.unwrap_or(f64::NAN));
            if epoch == 300 {
                s300 = v.report.median_abs_s;
            }
            if epoch == 175 {
                audit = v.audit_agreement();
            }
        }
        let monotone = sm.windows(2).all(|w| w[1] >= w[0] - 0.02);
        let ok = monotone
            && sm[2] >= 0.93
            && sm[4] >= 0.95
            && s300.is_some_and(|s| s >= 0.5)
            && audit == Some((10, 10));
        pass &= ok;
        parts.push(format!(
            "seed {seed}: sign_match {} median|S|@300 {:.3?} audit@175 {:?}",
            list(sm.iter().map(|x| format!("{x:.3}"))),
            s300,
            audit
        ));
    }
    pass &= slowest <= 600.0;
    Ok((pass, format!("{}; slowest checkpoint {slowest:.1} s", parts.join("; "))))
}

fn criterion_5(relu: &Cells) -> Result<(bool, String), String> {
    let g = fires(&relu.grok)?;
    let c = fires(&relu.control)?;
    let t099: Vec<Option<usize>> = g.iter().map(|f| f.test_crossing(0.99).epoch()).collect();
    let slope: Vec<Option<usize>> = g.iter().map(|f| f.slope_fire.epoch()).collect();
    let (lg, lc) = (late_median(&g), late_median(&c));
    let sep = match (lg, lc) {
        (Some(a), Some(b)) if b > 0.0 => Some(a / b),
        _ => None,
    };
    let mut sm500 = Vec::new();
    for e in &relu.grok {
        let run = StoredRun::load(e.dir.as_ref().ok_or("no run dir")?).map_err(|e| e.to_string())?;
        let cfg = VerifyConfig::for_activation(Activation::Relu, run.manifest.config.eta);
        let split = run.manifest.config.make_split().map_err(|e| e.to_string())?;
        let ck = run.checkpoint(500).map_err(|e| e.to_string())?;
        let f = thm6::checkpoint_features(&split, &ck.params, Activation::Relu).map_err(|e| e.to_string())?;
        let v = thm6::verify_features(f.as_ref(), &cfg, 500, None).map_err(|e| e.to_string())?;
        sm500.push(v.report.sign_match.unwrap_or(f64::NAN));
    }
    let pass = g.len() == 3
        && t099.iter().all(|t| t.is_some_and(|t| (350..=700).contains(&t)))
        && slope.iter().all(Option::is_none)
        && sep.is_some_and(|s| s <= 5.0)
        && sm500.iter().all(|&s| s >= 0.98);
    Ok((
        pass,
        format!(
            "test>=0.99 at {}; slope fire {}; late s2/s3 relu {:.2?} control {:.2?} separation {:.2?}x; sign_match@500 {}",
            list(t099),
            list(slope),
            lg,
            lc,
            sep,
            list(sm500.iter().map(|x| format!("{x:.3}")))
        ),
    ))
}

fn criterion_6(w5: &Cells, h: &Cells) -> Result<(bool, String), String> {
    let seeds3 = |v: &[RunEntry]| v.iter().filter(|e| e.seed < 3).cloned().collect::<Vec<_>>();
    let (g20, c20) = (seeds3(&h.grok), seeds3(&h.control));
    let fired = |v: &[RunEntry]| -> Result<Vec<Option<usize>>, String> { Ok(fires(v)?.iter().map(|f| f.slope_fire.epoch()).collect()) };
    let (fc5, fg5, fc20, fg20) = (fired(&w5.control)?, fired(&w5.grok)?, fired(&c20)?, fired(&g20)?);
    let count = |v: &[Option<usize>]| v.iter().filter(|f| f.is_some()).count();
    let pass = count(&fc5) >= 2 && count(&fc20) == 0 && count(&fg20) == 3;
    Ok((
        pass,
        format!(
            "W=5 control fires {} ({}/3), grok {}; W=20 control {} ({}/3), grok {} ({}/3)",
            list(&fc5),
            count(&fc5),
            list(&fg5),
            list(&fc20),
            count(&fc20),
            list(&fg20),
            count(&fg20)
        ),
    ))
}

fn criterion_7(h: &Cells) -> Result<(bool, String), String> {
    let g = fires(&h.grok)?;
    let c = fires(&h.control)?;
    let gr: Vec<Option<usize>> = g.iter().map(|f| f.rho_fire.epoch()).collect();
    let cr: Vec<Option<usize>> = c.iter().map(|f| f.rho_fire.epoch()).collect();
    let leads: Vec<Option<i64>> = g.iter().map(|f| lead_lag(f.test_crossing(0.5), f.rho_fire)).collect();
    let cmax: Vec<String> = c.iter().map(|f| format!("{:.4}", f.max_rho.unwrap_or(f64::NAN))).collect();
    let pass = gr.iter().all(|t| t.is_some_and(|t| t <= 40))
        && cr.iter().all(Option::is_none)
        && leads.iter().all(|l| l.is_some_and(|l| l > 0));
    Ok((
        pass,
        format!(
            "grok rho fire {}; control {} (max rho {}); lead vs test>=0.5 {}",
            list(gr),
            list(cr),
            list(cmax),
            list(leads)
        ),
    ))
}

fn criterion_8(ext: &[RunEntry], h: &Cells) -> Result<(bool, String), String> {
    let f = fires(ext)?;
    let f = f.first().ok_or("no extended run")?;
    let t099 = f.test_crossing(0.99).epoch();
    let lead = lead_lag(f.test_crossing(0.5), f.rho_fire);
    let head_peak = median(&fires(&h.grok)?.iter().filter_map(|s| s.peak_gap23).collect::<Vec<_>>());
    let pass = t099.is_some_and(|t| (1200..=2000).contains(&t))
        && f.rho_fire.fired()
        && lead.is_some_and(|l| l >= 300)
        && matches!((f.peak_gap23, head_peak), (Some(p), Some(hp)) if p >= hp / 10.0);
    Ok((
        pass,
        format!(
            "test>=0.99 at {:?}; rho fire {:?}, test>=0.5 at {:?}, lead {:?}; peak s2/s3 {:.1?} vs headline {:.1?}",
            t099,
            f.rho_fire.epoch(),
            f.test_crossing(0.5).epoch(),
            lead,
            f.peak_gap23,
            head_peak
        ),
    ))
}

fn criterion_9() -> Result<(bool, String), String> {
    let t0 = Instant::now();
    let wood = common::woodbury_error(20);
    let proj = common::projector_two_form_error(20);
    let (bad, checked) = common::exact_sign_rule(20, 1e-12);
    let gsq = common::gradient_check(Activation::Square, 10);
    let grelu = common::gradient_check(Activation::Relu, 10);
    let gram_ok = (0..20).all(|seed| {
        let mut r = common::rng(900 + seed);
        let mut w = grokking_lab::instrumentation::SpectralWindow::new(6);
        let mut ok = true;
        for _ in 0..10 {
            let d = common::random_mat(1, 9, &mut r);
            let s = w.push_and_spectrum((0..9).map(|j| d[(0, j)]).collect()).unwrap();
            ok &= s.iter().all(|&x| x >= 0.0) && s.windows(2).all(|p| p[0] >= p[1]);
        }
        ok
    });
    let slope = common::synthetic_slope_fire();
    let replay = common::replay_toy();
    let secs = t0.elapsed().as_secs_f64();
    let pass = wood <= 1e-8
        && proj <= 1e-10
        && bad == 0
        && checked > 0
        && gsq <= 1e-5
        && grelu <= 1e-5
        && gram_ok
        && slope == Some(171)
        && replay
        && secs < 60.0;
    Ok((
        pass,
        format!(
            "woodbury {wood:.1e}; projector forms {proj:.1e}; exact sign rule {bad} violations / {checked} pairs; \
             gradients square {gsq:.1e} relu {grelu:.1e}; gram spectra ok {gram_ok}; synthetic slope fire {slope:?}; \
             replay {replay}; {secs:.1} s"
        ),
    ))
}

#[test]
fn acceptance() {
    say(&format!("acceptance cache: {}", cache_root().display()));
    let mut report = Report { lines: Vec::new() };

    // no training needed
    report.record(9, criterion_9());

    let seeds5 = || (0..5).collect::<Vec<u64>>();
    let headline = split(sweep(
        "headline",
        headline_base(),
        Axes {
            seed: seeds5(),
            eta: vec![GROK_ETA, 0.0],
            ..Default::default()
        },
    ));
    report.record(1, criterion_1(&headline));
    report.record(2, criterion_2(&headline));
    report.record(3, criterion_3(&headline));
    report.record(7, criterion_7(&headline));
    report.record(4, criterion_4(&headline));

    let w5 = split(sweep(
        "window5",
        RunConfig {
            gram_window: 5,
            metric_cadence: 10,
            checkpoint_epochs: Vec::new(),
            ..headline_base()
        },
        Axes {
            seed: vec![0, 1, 2],
            eta: vec![GROK_ETA, 0.0],
            ..Default::default()
        },
    ));
    report.record(6, criterion_6(&w5, &headline));

    let relu = split(sweep(
        "relu",
        RunConfig {
            activation: Activation::Relu,
            epochs: 800,
            metric_cadence: 10,
            checkpoint_epochs: RELU_CHECKPOINTS.to_vec(),
            ..headline_base()
        },
        Axes {
            seed: vec![0, 1, 2],
            eta: vec![GROK_ETA, 0.0],
            ..Default::default()
        },
    ));
    report.record(5, criterion_5(&relu));

    let ext = sweep(
        "eta1e5",
        RunConfig {
            eta: 1e-5,
            epochs: 2000,
            metric_cadence: 5,
            checkpoint_epochs: Vec::new(),
            ..headline_base()
        },
        Axes {
            seed: vec![0],
            ..Default::default()
        },
    );
    report.record(8, criterion_8(&ext, &headline));

    report.lines.sort_by_key(|l| l.0);
    say("---- acceptance summary ----");
    for (_, _, line) in &report.lines {
        say(line);
    }
    let _ = std::fs::write(
        cache_root().join("acceptance.txt"),
        report.lines.iter().map(|l| format!("{}\n", l.2)).collect::<String>(),
    );
    assert_eq!(report.lines.len(), 9, "every criterion evaluated");
    if std::env::var_os("GROKLAB_ACCEPTANCE_STRICT").is_some() {
        let failed: Vec<u8> = report.lines.iter().filter(|l| !l.1).map(|l| l.0).collect();
        assert!(failed.is_empty(), "failed criteria: {failed:?}");
    }
}
