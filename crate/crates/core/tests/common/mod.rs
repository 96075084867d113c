//! Seeded instance set shared by the integration tests.
#![allow(dead_code)]

use cpkrylov::linops::MatrixStorage;
use cpkrylov::problems::{gen_random_system, SystemProps};
use cpkrylov::saddle::SaddleSystem;

pub struct Instance {
    pub name: String,
    pub sys: SaddleSystem,
    pub g: MatrixStorage,
    pub props: SystemProps,
}

impl Instance {
    pub fn n(&self) -> usize {
        self.sys.n()
    }

    pub fn m(&self) -> usize {
        self.sys.m()
    }
}

/// 20 systems, `n ≤ 50`, `m ≤ 15`, C ranks from 0 to m, a few indefinite
/// `C` and a few nonsymmetric `A`.
pub fn suite() -> Vec<Instance> {
    (0..20u64)
        .map(|i| {
            let n = 10 + (i as usize * 7) % 41;
            let m = (3 + (i as usize * 5) % 13).min(n - 2);
            let c_rank = match i % 5 {
                0 => 0,
                1 => m,
                2 => m / 2,
                3 => (m / 2).max(2),
                _ => 1,
            };
            let props = SystemProps {
                c_rank,
                c_psd: i % 5 != 3,
                a_symmetric: i % 4 != 1,
                assumption_ok: true,
                zero_b2: true,
            };
            let (sys, g) = gen_random_system(n, m, 1000 + i, props).expect("suite instance");
            Instance {
                name: format!("s{i:02}_n{n}_m{m}_p{c_rank}{}{}", if props.c_psd { "" } else { "i" }, if props.a_symmetric { "" } else { "u" }),
                sys,
                g,
                props,
            }
        })
        .collect()
}

pub fn rel(a: &[f64], b: &[f64]) -> f64 {
    let d: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let s: f64 = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    if s > 0.0 { d / s } else { d }
}
