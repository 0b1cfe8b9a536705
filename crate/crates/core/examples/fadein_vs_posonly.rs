//! Both fitting modes on the envelope of a room-to-room response.

use fadein::decay::{build_kernels, decay_rate_to_kernel, CommonTimes};
use fadein::signal::{envelope_time, rms_envelope};
use fadein::sim::{chain_response, RoomChain};
use fadein::slope_fit::{fit_envelope, skip_head_points, Mode};

fn main() -> fadein::Result<()> {
    let (fs, len, w) = (48_000u32, 48_000, 240);
    let rir = chain_response(&RoomChain::new(vec![20.0, 5.0], len, fs, 3)?)?;
    let env = rms_envelope(&rir, w)?;
    let times = vec![decay_rate_to_kernel(20.0), decay_rate_to_kernel(5.0)];
    let kernels = build_kernels(&[CommonTimes { band_center: 0.0, times }], env.len(), w, fs)?;
    let band = &kernels.bands[0];
    let skip = skip_head_points(8.0, w, fs);

    let fade = fit_envelope(&env, band, Mode::FadeIn, skip)?;
    let pos = fit_envelope(&env, band, Mode::PosOnly, skip)?;
    for fit in [&fade, &pos] {
        println!(
            "{:<8} amplitudes {:?} noise {:.3e} objective {:.4} ({} iterations)",
            fit.mode.to_string(),
            fit.amplitudes,
            fit.noise,
            fit.objective_value,
            fit.iterations
        );
    }
    let (m_fade, m_pos) = (fade.evaluate(band)?, pos.evaluate(band)?);
    println!("\n{:>8} {:>10} {:>10} {:>10}", "t [s]", "measured", "fadein", "posonly");
    for m in (0..env.len()).step_by(10) {
        println!(
            "{:>8.3} {:>10.2} {:>10.2} {:>10.2}",
            envelope_time(m, w) / fs as f64,
            env[m],
            m_fade[m],
            m_pos[m]
        );
    }
    Ok(())
}
