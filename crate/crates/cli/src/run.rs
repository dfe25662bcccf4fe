//! Experiment pipelines. Each one writes its artifact files into the
//! output directory; the manifest is always written last so it covers
//! everything the run produced.

use std::path::Path;

use serde::Serialize;

use anosovlab::entropy::{
    self, BowenConfig, CoreRegion, LocalEntropy, LowerBoundContext, PartitionSpec,
};
use anosovlab::flow::{sample_trajectory, TrajectoryRecord, DEFAULT_FLOW_STEP};
use anosovlab::geometry::SurfaceModel;
use anosovlab::report::{model_label, write_csv, write_json, write_manifest, SpectrumRecord};
use anosovlab::sasaki::UnitTangentState;
use anosovlab::spectrum::{lyapunov_spectrum, LyapunovSpectrum, SpectrumConfig};
use anosovlab::splitting::{
    build_certificate, check_bounds, fit_anosov_constants, sample_angle_stats, sample_states,
    theorem51_inclusion, AnosovCertificate, BoundsReport, InclusionReport,
};
use anosovlab::Result;

use crate::scenario::{Experiment, Scenario};

pub const SPECTRUM_TRACE_HEADER: &str = "theta_id,t,top,neutral,bottom";

/// Chart box the non-core experiments draw their states from. Kept away
/// from chart edges so splitting estimates stay well conditioned.
fn state_box(model: &SurfaceModel) -> ((f64, f64), (f64, f64)) {
    match model {
        SurfaceModel::Modular => ((-0.5, 0.5), (1.0, 2.5)),
        SurfaceModel::Flat => ((-1.5, 1.5), (-1.5, 1.5)),
        _ => ((-1.2, 1.2), (0.7, 2.2)),
    }
}

pub fn run_scenario(sc: &Scenario, out: &Path) -> Result<()> {
    std::fs::create_dir_all(out)?;
    match sc.experiment {
        Experiment::Spectrum => {
            run_spectrum(sc, out)?;
        }
        Experiment::Bounds => {
            run_bounds(sc, out)?;
        }
        Experiment::Inclusion => {
            run_inclusion(sc, out)?;
        }
        Experiment::Entropy => {
            run_entropy(sc, out)?;
        }
        Experiment::FullVerdict => run_full(sc, out)?,
    }
    write_manifest(out)?;
    Ok(())
}

fn spectrum_states(sc: &Scenario) -> Result<Vec<UnitTangentState>> {
    if let Some([x, y, angle]) = sc.spectrum.theta {
        return Ok(vec![UnitTangentState::from_angle(&sc.model, x, y, angle)?]);
    }
    let (xr, yr) = state_box(&sc.model);
    sample_states(&sc.model, sc.spectrum.states, sc.seed, xr, yr)
}

fn run_spectrum(sc: &Scenario, out: &Path) -> Result<Vec<LyapunovSpectrum>> {
    let states = spectrum_states(sc)?;
    let config = SpectrumConfig {
        horizon: sc.spectrum.horizon,
        renorm_dt: sc.spectrum.renorm_dt,
        checkpoints: sc.spectrum.checkpoints,
    };
    let mut spectra = Vec::with_capacity(states.len());
    let mut records = Vec::with_capacity(states.len());
    let mut trace_rows = Vec::new();
    for (i, theta) in states.iter().enumerate() {
        let sp = lyapunov_spectrum(&sc.model, theta, &config, DEFAULT_FLOW_STEP)?;
        for cp in &sp.trace {
            trace_rows.push(format!(
                "{},{:.17e},{:.17e},{:.17e},{:.17e}",
                i, cp.t, cp.exponents[0], cp.exponents[1], cp.exponents[2]
            ));
        }
        records.push(SpectrumRecord::new(&sc.model, theta, &sp));
        spectra.push(sp);
    }
    write_json(&out.join("spectrum.json"), &records)?;
    write_csv(&out.join("spectrum_trace.csv"), SPECTRUM_TRACE_HEADER, &trace_rows)?;

    let orbit_horizon = sc.spectrum.horizon.min(50.0);
    let track = sample_trajectory(&sc.model, &states[0], orbit_horizon, 200, DEFAULT_FLOW_STEP)?;
    let rows: Vec<String> = track.iter().map(TrajectoryRecord::csv_row).collect();
    write_csv(&out.join("trajectory.csv"), TrajectoryRecord::CSV_HEADER, &rows)?;
    Ok(spectra)
}

/// Fit the contraction data and assemble the certificate, drawing the
/// fit states and the check states from one deterministic sequence.
fn certify(sc: &Scenario, extra: usize) -> Result<(AnosovCertificate, Vec<UnitTangentState>)> {
    let (xr, yr) = state_box(&sc.model);
    let total = sc.bounds.fit_states + extra;
    let mut states = sample_states(&sc.model, total, sc.seed, xr, yr)?;
    let check = states.split_off(sc.bounds.fit_states);
    let fit = fit_anosov_constants(&sc.model, &states, DEFAULT_FLOW_STEP)?;
    let angles = sample_angle_stats(&sc.model, &states, sc.bounds.horizon, DEFAULT_FLOW_STEP)?;
    let cert = build_certificate(&sc.model, &fit, &angles, None)?;
    Ok((cert, check))
}

fn run_bounds(sc: &Scenario, out: &Path) -> Result<BoundsReport> {
    let (cert, check) = certify(sc, sc.bounds.samples)?;
    let report = check_bounds(&sc.model, &cert, &check, sc.seed, DEFAULT_FLOW_STEP)?;
    write_json(&out.join("certificate.json"), &cert)?;
    write_json(&out.join("bounds.json"), &report)?;
    Ok(report)
}

fn run_inclusion(sc: &Scenario, out: &Path) -> Result<InclusionReport> {
    let (cert, check) = certify(sc, 1)?;
    let theta = match sc.spectrum.theta {
        Some([x, y, angle]) => UnitTangentState::from_angle(&sc.model, x, y, angle)?,
        None => check[0],
    };
    let report = theorem51_inclusion(
        &sc.model,
        &cert,
        &theta,
        sc.inclusion.rho,
        sc.inclusion.samples,
        sc.seed,
        DEFAULT_FLOW_STEP,
    )?;
    write_json(&out.join("certificate.json"), &cert)?;
    write_json(&out.join("inclusion.json"), &report)?;
    Ok(report)
}

struct EntropyArtifacts {
    report: entropy::EntropyReport,
    spectra: Vec<LyapunovSpectrum>,
}

fn run_entropy(sc: &Scenario, out: &Path) -> Result<EntropyArtifacts> {
    let plan = &sc.entropy;
    let core = CoreRegion::default_for(&sc.model);
    let thetas = entropy::liouville_sample_core(&sc.model, &core, plan.states, sc.seed, 0)?;
    let sup_states =
        entropy::liouville_sample_core(&sc.model, &core, plan.suprema_samples, sc.seed, 1)?;
    let suprema = entropy::sampled_suprema(&sc.model, &sup_states, DEFAULT_FLOW_STEP)?;

    let spec_config = SpectrumConfig { horizon: plan.spectrum_horizon, ..SpectrumConfig::default() };
    let mut spectra = Vec::with_capacity(thetas.len());
    for theta in &thetas {
        spectra.push(lyapunov_spectrum(&sc.model, theta, &spec_config, DEFAULT_FLOW_STEP)?);
    }

    let cfg = BowenConfig {
        rho_const: plan.rho,
        n_max: plan.n_max,
        samples_per_depth: plan.samples_per_depth,
        ..BowenConfig::default_for(&sc.model)
    };
    let mut locals: Vec<LocalEntropy> = Vec::with_capacity(thetas.len());
    for (i, theta) in thetas.iter().enumerate() {
        let ctx =
            LowerBoundContext { chi_plus: spectra[i].chi_plus, p_logdet: suprema.p_logdet };
        locals.push(entropy::local_entropy(
            &sc.model,
            theta,
            &cfg,
            Some(&ctx),
            sc.seed,
            i,
            DEFAULT_FLOW_STEP,
        )?);
    }

    // cell diameter the inclusion argument would prescribe; the grid runs
    // coarser and the report records the gap
    let (cert, _) = certify(sc, 0)?;
    let prescribed = cert.beta / cert.kappa * plan.rho;
    let partition = entropy::partition_entropy_bound(
        &sc.model,
        &core,
        &PartitionSpec { cell_size: plan.partition_cell, angle_cells: plan.partition_angles },
        cert.iterate as f64,
        plan.partition_samples,
        sc.seed,
        suprema.upsilon,
        prescribed,
        DEFAULT_FLOW_STEP,
    )?;

    let report = entropy::verdict(
        &sc.model,
        &cfg,
        &spectra,
        &locals,
        Some(&partition),
        &suprema,
        plan.tolerance,
    )?;

    let records: Vec<SpectrumRecord> = thetas
        .iter()
        .zip(&spectra)
        .map(|(theta, sp)| SpectrumRecord::new(&sc.model, theta, sp))
        .collect();
    write_json(&out.join("spectrum.json"), &records)?;
    write_json(&out.join("entropy.json"), &report)?;
    write_json(&out.join("partition.json"), &partition)?;

    let mut rows = Vec::new();
    for local in &locals {
        rows.extend(local.curve.csv_rows());
    }
    write_csv(&out.join("bowen_counts.csv"), entropy::BOWEN_CSV_HEADER, &rows)?;
    Ok(EntropyArtifacts { report, spectra })
}

/// Top-level summary for a combined run; field order fixes the JSON
/// key order.
#[derive(Debug, Serialize)]
struct FullReport {
    model: String,
    seed: u64,
    chi_plus: f64,
    h_central: f64,
    ruelle_slack: f64,
    ruelle_pass: bool,
    pesin_deviation: f64,
    pesin_applicable: bool,
    pesin_pass: Option<bool>,
    spectra_converged: bool,
    bound_violations: usize,
    bounds_pass: bool,
    inclusion_pass: bool,
    tolerance: f64,
}

fn run_full(sc: &Scenario, out: &Path) -> Result<()> {
    let spectra = run_spectrum(sc, out)?;
    let bounds = run_bounds(sc, out)?;
    let inclusion = run_inclusion(sc, out)?;
    let arts = run_entropy(sc, out)?;

    let violations: usize = bounds.rows.iter().map(|r| r.violations).sum();
    let report = FullReport {
        model: model_label(&sc.model),
        seed: sc.seed,
        chi_plus: arts.report.chi_plus,
        h_central: arts.report.h_central,
        ruelle_slack: arts.report.ruelle_slack,
        ruelle_pass: arts.report.ruelle_pass,
        pesin_deviation: arts.report.pesin_deviation,
        pesin_applicable: arts.report.pesin_applicable,
        pesin_pass: arts.report.pesin_pass,
        spectra_converged: spectra.iter().chain(arts.spectra.iter()).all(|s| s.converged),
        bound_violations: violations,
        bounds_pass: violations == 0,
        inclusion_pass: inclusion.pass,
        tolerance: sc.entropy.tolerance,
    };
    write_json(&out.join("report.json"), &report)
}
