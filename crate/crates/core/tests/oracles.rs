use mandelq::simulate::{
    detection_chain, simulate, simulate_emission_cw, simulate_emission_pulsed, SimulationConfig,
};
use mandelq::stats::{
    g2_histogram_cw, mandel_q, mandel_q_series, photon_number_distribution, Binning, QOptions,
};
use mandelq::{
    merge_channels, partition_windows, Acquisition, DetectionChainParams, DetectionRecord,
    EmitterRates, ExcitationMode, TimestampSeries, DEFAULT_K_MAX, PS_PER_S,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp};

const NS: f64 = 1e3;
const NS_U: u64 = 1_000;

/// Renewal-reward oracle for CW emission: each cycle is excitation, the
/// excited-state race and (if shelved) the shelf dwell. Returns the photon
/// rate per ps and the asymptotic variance of the photon count per ps.
fn cw_renewal(tau12: f64, tau21: f64, shelf: Option<(f64, f64)>) -> (f64, f64) {
    let (p, tm, tau31) = match shelf {
        None => (1.0, tau21, 0.0),
        Some((tau23, tau31)) => {
            let k = 1.0 / tau21 + 1.0 / tau23;
            ((1.0 / tau21) / k, 1.0 / k, tau31)
        }
    };
    let mu = tau12 + tm + (1.0 - p) * tau31;
    let r = p / mu;
    // X = R - r C with C = t12 + m + (1 - R) t31, R independent of m
    let var_a = r * r * (tau12 * tau12 + tm * tm);
    let e_b = p - r * (1.0 - p) * tau31;
    let e_b2 = p + (1.0 - p) * r * r * 2.0 * tau31 * tau31;
    let var_x = var_a + e_b2 - e_b * e_b;
    (r, var_x / mu)
}

#[test]
fn two_level_cw_rate_matches_renewal_oracle() {
    let duration = 200_000_000_000u64; // 0.2 s
    let (tau12, tau21) = (205.0 * NS, 1.6 * NS);
    let rates = EmitterRates::two_level(tau12, tau21).unwrap();
    let e = simulate_emission_cw(&rates, duration, 17).unwrap();
    let (r, v) = cw_renewal(tau12, tau21, None);
    assert!((r - 1.0 / (tau12 + tau21)).abs() < 1e-15);
    let d = duration as f64;
    let se = (v * d).sqrt();
    let n = e.photons.len() as f64;
    assert!((n - r * d).abs() < 3.0 * se, "n {n} expect {} se {se}", r * d);
}

#[test]
fn three_level_cw_rate_matches_renewal_oracle() {
    let duration = 200_000_000_000u64;
    let rates = EmitterRates::three_level(205.0 * NS, 1.6 * NS, 1.4 * NS, 420.0 * NS).unwrap();
    let e = simulate_emission_cw(&rates, duration, 18).unwrap();
    let (r, v) = cw_renewal(205.0 * NS, 1.6 * NS, Some((1.4 * NS, 420.0 * NS)));
    let d = duration as f64;
    let se = (v * d).sqrt();
    let n = e.photons.len() as f64;
    assert!((n - r * d).abs() < 3.0 * se, "n {n} expect {} se {se}", r * d);
}

#[test]
fn radiative_fraction_matches_competing_exponentials() {
    let rates = EmitterRates::three_level(205.0 * NS, 1.6 * NS, 1.4 * NS, 420.0 * NS).unwrap();
    let p = 1.4 / (1.6 + 1.4);
    assert!((rates.radiative_fraction() - p).abs() < 1e-15);
    assert!((p - 0.4667).abs() < 5e-5);
    let e = simulate_emission_cw(&rates, 100_000_000_000, 19).unwrap();
    let n = e.cycles as f64;
    let frac = e.radiative_cycles as f64 / n;
    let se = (p * (1.0 - p) / n).sqrt();
    assert!((frac - p).abs() < 3.0 * se, "{frac} vs {p} se {se}");
}

/// Survival of a sum of independent exponentials with distinct rates.
fn hypoexp_survival(rates: &[f64], x: f64) -> f64 {
    rates
        .iter()
        .enumerate()
        .map(|(i, &li)| {
            let w: f64 = rates
                .iter()
                .enumerate()
                .filter(|&(j, _)| j != i)
                .map(|(_, &lj)| lj / (lj - li))
                .product();
            w * (-li * x).exp()
        })
        .sum()
}

/// Mean photons per pulse period: a cycle occupies `ceil(X / rep)` periods,
/// where X is the excitation delay plus the excited-state dwell plus the shelf
/// dwell for shelved cycles.
fn pulsed_photons_per_period(tau12: f64, tau21: f64, tau23: f64, tau31: f64, rep: f64) -> f64 {
    let k = 1.0 / tau21 + 1.0 / tau23;
    let p = (1.0 / tau21) / k;
    let radiative = [1.0 / tau12, k];
    let shelved = [1.0 / tau12, k, 1.0 / tau31];
    // E[ceil(X/rep)] = sum_{j >= 0} P(X > j rep)
    let mut periods = 0.0;
    for j in 0..100_000 {
        let x = j as f64 * rep;
        let s = p * hypoexp_survival(&radiative, x) + (1.0 - p) * hypoexp_survival(&shelved, x);
        periods += s;
        if s < 1e-16 {
            break;
        }
    }
    p / periods
}

#[test]
fn pulsed_rate_matches_renewal_oracle() {
    let rep = 100_000u64;
    let duration = 1_000_000_000_000u64; // 1 s
    let (t12, t21, t23, t31) = (0.1 * NS, 2.70 * NS, 2.40 * NS, 420.0 * NS);
    let rates = EmitterRates::three_level(t12, t21, t23, t31).unwrap();
    let config = SimulationConfig {
        rates,
        chain: DetectionChainParams::symmetric(2.54e-3, 0, 0.0),
        mode: ExcitationMode::pulsed(rep),
        duration,
        seed: 23,
    };
    let acq = simulate(&config).unwrap();
    let periods = (duration / rep) as f64;
    let per_period = pulsed_photons_per_period(t12, t21, t23, t31, rep as f64);
    let expect = per_period * periods * 2.54e-3;
    let got = (acq.count(1) + acq.count(2)) as f64;
    assert!(((got - expect) / expect).abs() < 0.05, "got {got} expect {expect}");

    // the emission stream itself against the same oracle, much tighter
    let e = simulate_emission_pulsed(&rates, rep, duration, 23).unwrap();
    let n = e.photons.len() as f64;
    assert!(((n - per_period * periods) / n).abs() < 0.01);
}

#[test]
fn pulsed_emits_at_most_once_per_period_without_shelving() {
    let rates = EmitterRates::two_level(0.1 * NS, 2.7 * NS).unwrap();
    let e = simulate_emission_pulsed(&rates, 100_000, 10_000_000_000, 5).unwrap();
    let mut periods: Vec<u64> = e.photons.times().iter().map(|t| t / 100_000).collect();
    let n = periods.len();
    periods.dedup();
    assert_eq!(periods.len(), n);
    assert_eq!(e.triggers[..3], [0, 100_000, 200_000]);
}

#[test]
fn unreachable_shelving_reproduces_two_level() {
    let two = EmitterRates::two_level(205.0 * NS, 1.6 * NS).unwrap();
    let three = EmitterRates::three_level(205.0 * NS, 1.6 * NS, 1e300, 420.0 * NS).unwrap();
    let a = simulate_emission_cw(&two, 10_000_000_000, 8).unwrap();
    let b = simulate_emission_cw(&three, 10_000_000_000, 8).unwrap();
    assert_eq!(a.photons, b.photons);
}

#[test]
fn chain_examples() {
    let rates = EmitterRates::two_level(50.0 * NS, 1.6 * NS).unwrap();
    let e = simulate_emission_cw(&rates, 10_000_000_000, 4).unwrap();
    let none = detection_chain(&e, &DetectionChainParams::symmetric(0.0, 0, 0.0), 1).unwrap();
    assert_eq!(none.count(1) + none.count(2), 0);
    let all = detection_chain(&e, &DetectionChainParams::symmetric(1.0, 0, 0.0), 1).unwrap();
    assert_eq!(all.count(1) + all.count(2), e.photons.len());
    let dead = detection_chain(&e, &DetectionChainParams::symmetric(1.0, 80 * NS_U, 1e5), 1).unwrap();
    for ch in [1, 2] {
        let t = dead.channel_times(ch);
        assert!(t.windows(2).all(|w| w[1] - w[0] >= 80 * NS_U));
    }
    // deadtime never changes which photons reach which detector before it acts
    let dead0 = detection_chain(&e, &DetectionChainParams::symmetric(1.0, 80 * NS_U, 0.0), 1).unwrap();
    for ch in [1, 2] {
        let kept = dead0.channel_times(ch);
        let full = all.channel_times(ch);
        assert!(kept.iter().all(|t| full.binary_search(t).is_ok()));
    }
}

#[test]
fn simulation_is_reproducible() {
    let config = SimulationConfig {
        rates: EmitterRates::three_level(0.1 * NS, 2.7 * NS, 2.4 * NS, 420.0 * NS).unwrap(),
        chain: DetectionChainParams::symmetric(0.1, 80 * NS_U, 200.0),
        mode: ExcitationMode::pulsed(100_000),
        duration: 10_000_000_000,
        seed: 99,
    };
    assert_eq!(simulate(&config).unwrap(), simulate(&config).unwrap());
    let other = SimulationConfig { seed: 100, ..config.clone() };
    assert_ne!(simulate(&config).unwrap(), simulate(&other).unwrap());
}

fn poisson_series(rate_hz: f64, duration: u64, seed: u64) -> TimestampSeries {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let gap = Exp::new(rate_hz / PS_PER_S).unwrap();
    let mut t = 0.0;
    let mut out = Vec::new();
    loop {
        t += gap.sample(&mut rng);
        if t >= duration as f64 {
            break;
        }
        out.push(t as u64);
    }
    TimestampSeries::new(out, duration).unwrap()
}

#[test]
fn independent_poisson_g2_is_flat() {
    let duration = 10_000_000_000u64; // 10 ms
    let a = poisson_series(2e6, duration, 1);
    let b = poisson_series(2e6, duration, 2);
    let h = g2_histogram_cw(&a, &b, 1_000 * NS_U, &Binning::Linear { bin_width: 10 * NS_U }).unwrap();
    for (c, e) in h.counts.iter().zip(h.expected_uncorrelated()) {
        let z = (*c as f64 - e) / e.sqrt();
        assert!(z.abs() < 5.0, "z = {z}");
    }
    let mean = h.normalized().iter().sum::<f64>() / h.counts.len() as f64;
    assert!((mean - 1.0).abs() < 0.01);
}

#[test]
fn hand_examples() {
    let s = TimestampSeries::new(vec![5 * NS_U, 15 * NS_U, 25 * NS_U, 95 * NS_U], 100 * NS_U).unwrap();
    assert_eq!(partition_windows(&s, 50 * NS_U, DEFAULT_K_MAX, 0).unwrap(), vec![3, 1]);
    let q = mandel_q(&s, 50 * NS_U, DEFAULT_K_MAX, 0).unwrap();
    assert_eq!(q.q, -0.5);
    assert_eq!((q.mean, q.variance), (2.0, 1.0));
    let p = photon_number_distribution(&s, 50 * NS_U, DEFAULT_K_MAX, 0).unwrap();
    assert_eq!(p.probabilities, vec![0.0, 0.5, 0.0, 0.5]);

    let one_each = TimestampSeries::new((0..10).map(|i| i * 10 + 3).collect(), 100).unwrap();
    assert_eq!(mandel_q(&one_each, 10, DEFAULT_K_MAX, 0).unwrap().q, -1.0);
    let p = photon_number_distribution(&one_each, 10, DEFAULT_K_MAX, 0).unwrap();
    assert_eq!((p.probabilities.clone(), p.std), (vec![0.0, 1.0], 0.0));

    let empty = TimestampSeries::new(vec![], 100).unwrap();
    assert_eq!(photon_number_distribution(&empty, 10, DEFAULT_K_MAX, 0).unwrap().probabilities, vec![1.0]);
    assert!(mandel_q(&empty, 10, DEFAULT_K_MAX, 0).is_err());
}

#[test]
fn merge_examples() {
    let acq = Acquisition::new(
        100 * NS_U,
        vec![DetectionRecord::new(1, 5 * NS_U), DetectionRecord::new(2, 3 * NS_U)],
        [1, 2],
        ExcitationMode::cw(),
        None,
    )
    .unwrap();
    assert_eq!(merge_channels(&acq, &[1, 2]).unwrap().times(), &[3 * NS_U, 5 * NS_U]);
    let err = merge_channels(&acq, &[7]).unwrap_err();
    assert!(err.to_string().contains('7'));
    let ties = Acquisition::new(
        100 * NS_U,
        vec![DetectionRecord::new(2, 7 * NS_U), DetectionRecord::new(1, 7 * NS_U)],
        [1, 2],
        ExcitationMode::cw(),
        None,
    )
    .unwrap();
    assert_eq!(ties.records()[0].channel, 1);
    assert_eq!(merge_channels(&ties, &[1, 2]).unwrap().times(), &[7 * NS_U, 7 * NS_U]);
}

#[test]
fn q_series_single_and_duplicate() {
    let s: Vec<DetectionRecord> = (0..1_000u64)
        .map(|i| DetectionRecord::new(1 + (i % 2) as u8, i * 997 % 1_000_000))
        .collect();
    let acq = Acquisition::new(1_000_000, s, [1, 2], ExcitationMode::cw(), None).unwrap();
    let opts = QOptions {
        k_max: DEFAULT_K_MAX,
        pulsed_align: false,
    };
    let one = mandel_q_series(std::slice::from_ref(&acq), &[1_000, 10_000], &opts).unwrap();
    assert!(one.entries.iter().all(|e| e.std.is_none() && e.n_acquisitions == 1));
    let two = mandel_q_series(&[acq.clone(), acq], &[1_000, 10_000], &opts).unwrap();
    assert!(two.entries.iter().all(|e| e.std == Some(0.0) && e.n_acquisitions == 2));
}

#[test]
fn pulsed_series_rejects_non_multiples() {
    let recs = vec![DetectionRecord::new(0, 0), DetectionRecord::new(1, 7_000)];
    let acq = Acquisition::new(1_000_000, recs, [0, 1, 2], ExcitationMode::pulsed(100_000), None).unwrap();
    let opts = QOptions {
        k_max: DEFAULT_K_MAX,
        pulsed_align: true,
    };
    assert!(mandel_q_series(&[acq], &[150_000], &opts).is_err());
}
