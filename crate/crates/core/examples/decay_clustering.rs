//! Per-response decay estimation from energy decay curves followed by
//! K-means pooling into common decay times.

use fadein::decay::{cluster_decay_times, fit_edf_decays, kernel_to_decay_rate, DecayEstimate};
use fadein::signal::{octave_filterbank, schroeder_edf};
use fadein::sim::{gen_room_response, RoomChain, chain_response};

fn main() -> fadein::Result<()> {
    let fs = 48_000;
    let mut estimates: Vec<DecayEstimate> = Vec::new();
    for (i, rates) in [vec![20.0], vec![6.0], vec![20.0, 6.0], vec![11.0], vec![20.0]].iter().enumerate() {
        let rir = if rates.len() == 1 {
            gen_room_response(rates[0], fs as usize, fs, i as u64)?
        } else {
            chain_response(&RoomChain::new(rates.clone(), fs as usize, fs, i as u64)?)?
        };
        let band = octave_filterbank(&rir, &[1000.0])?.remove(0);
        let est = fit_edf_decays(&schroeder_edf(&band, false)?, fs, 3)?.labelled(1000.0, format!("p{i}"));
        let found: Vec<String> = est.decay_times.iter().map(|t| format!("{:.1}", kernel_to_decay_rate(*t))).collect();
        println!("p{i}: true rates {rates:?} 1/s, estimated [{}] 1/s", found.join(", "));
        estimates.push(est);
    }
    for common in cluster_decay_times(&estimates, 3, 0)? {
        let rates: Vec<String> = common.times.iter().map(|t| format!("{:.1}", kernel_to_decay_rate(*t))).collect();
        println!("common decay rates at {} Hz: [{}] 1/s", common.band_center, rates.join(", "));
    }
    Ok(())
}
