//! Throwaway diagnostic: decompose the MPC tracking cost of the trained
//! model at cycle 0 into encoder-feature and physical-coordinate parts.

use ndarray::{Array1, ArrayView1};

use formtwin::manifest::RunManifest;
use formtwin::pipeline::saturation_profile;
use formtwin_core::koopman::KoopmanModel;
use formtwin_core::mpc::lift_target;
use formtwin_core::reduction::ReductionBases;

fn stage_cost(z: &Array1<f64>, z_r: &Array1<f64>, q: &[f64], d_e: usize) -> (f64, f64) {
    let mut enc = 0.0;
    let mut phys = 0.0;
    for i in 0..z.len() {
        let c = q[i] * (z[i] - z_r[i]).powi(2);
        if i < d_e {
            enc += c;
        } else {
            phys += c;
        }
    }
    (enc, phys)
}

fn main() {
    let dir = std::path::Path::new("/tmp/run1");
    let manifest = RunManifest::default();
    let bases = ReductionBases::load(&dir.join("bases.json")).unwrap();
    let model = KoopmanModel::load(&dir.join("model.json")).unwrap();
    let dims = &model.dims;
    let d_e = dims.observable_dim;
    let spec = manifest.mpc.to_spec(dims).unwrap();

    let sat = saturation_profile(&manifest.plant, 6).unwrap();
    let target: Vec<f64> = sat.iter().map(|v| 0.6 * v).collect();
    let z_r = lift_target(&model, &bases, &target).unwrap();

    let enc_part = z_r.slice(ndarray::s![..d_e]);
    let rms = (enc_part.iter().map(|v| v * v).sum::<f64>() / d_e as f64).sqrt();
    let max = enc_part.iter().cloned().fold(0.0_f64, |a, b| a.max(b.abs()));
    println!("z_r encoder part: rms {rms:.3}, max |.| {max:.3}");
    println!(
        "z_r physical part: {:?}",
        z_r.slice(ndarray::s![d_e..]).to_vec()
    );

    // Initial state: flat sheet.
    let x0 = Array1::<f64>::zeros(bases.pod.mode_count());
    let z0 = model.lift(&x0);
    let enc0 = z0.slice(ndarray::s![..d_e]);
    let rms0 = (enc0.iter().map(|v| v * v).sum::<f64>() / d_e as f64).sqrt();
    println!("z0 encoder rms {rms0:.3}");

    // Candidate A: the QP's chosen first input from the recorded trace.
    let qp_u = vec![40.0, -40.0, -40.0, -0.0, -40.0];
    // Candidate B: one-sixth of the target lobe per cycle (a human plan).
    let lobe_fit = {
        let t = Array1::from(target.clone());
        let x = bases.pod.project(&t.view()).unwrap();
        // feed a toolpath equal to the Chebyshev fit of 1/4 of the
        // saturation lobe: fit on stations.
        let stations = &manifest.plant.station_grid;
        let lobe: Vec<f64> = stations
            .iter()
            .map(|&y| {
                -30.0 * 0.6 / 4.0
                    * (std::f64::consts::PI * y / stations.last().unwrap()).sin()
            })
            .collect();
        let c = bases
            .chebyshev
            .fit(&ArrayView1::from(&lobe[..]))
            .unwrap();
        let _ = x;
        c.to_vec()
    };
    println!("lobe-fit coefficients: {lobe_fit:?}");

    let q = &spec.q_diag;
    for (name, u) in [("qp_u", &qp_u), ("lobe", &lobe_fit)] {
        let mut z = z0.clone();
        println!("--- rollout with {name} every cycle ---");
        for k in 0..6 {
            let u_arr = Array1::from(u.clone());
            z = model.step_lifted(&z, &u_arr);
            let (enc, phys) = stage_cost(&z, &z_r, q, d_e);
            let x_pred = z.slice(ndarray::s![d_e..]).to_owned();
            let tip = bases.pod.reconstruct(&x_pred.view()).unwrap();
            println!(
                "  k={k}: enc_cost {enc:10.1}  phys_cost {phys:10.1}  pred_tip {:8.2}",
                tip.last().unwrap()
            );
        }
    }
}
