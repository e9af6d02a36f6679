//! The whole mobile generator re-derived with scalar loops straight from the
//! stored parameters, compared against the engine's forward pass.

#![allow(clippy::needless_range_loop)]

use msgan_core::{generator::init_random, Generator, GeneratorConfig, Rng, Tensor, WeightContainer};

/// `[c][y][x]` planes of one sample.
type Planes = Vec<Vec<Vec<f64>>>;

fn param<'a>(c: &'a WeightContainer, name: &str) -> &'a [f64] {
    c.get(name).unwrap_or_else(|| panic!("missing {name}")).data()
}

fn to_planes(t: &Tensor, n: usize) -> Planes {
    let s = t.shape();
    let (c, h, w) = (s[1], s[2], s[3]);
    (0..c)
        .map(|ch| (0..h).map(|y| (0..w).map(|x| t.at4(n, ch, y, x)).collect()).collect())
        .collect()
}

fn lrelu(v: f64) -> f64 {
    if v >= 0.0 {
        v
    } else {
        0.2 * v
    }
}

fn mapping(c: &WeightContainer, z: &[f64], layers: usize) -> Vec<f64> {
    let d = z.len();
    let ms = z.iter().map(|v| v * v).sum::<f64>() / d as f64;
    let mut x: Vec<f64> = z.iter().map(|v| v / (ms + 1e-8).sqrt()).collect();
    for l in 0..layers {
        let w = param(c, &format!("mapping.{l}.weight"));
        let b = param(c, &format!("mapping.{l}.bias"));
        x = (0..d)
            .map(|j| lrelu((0..d).map(|i| w[j * d + i] * x[i]).sum::<f64>() + b[j]))
            .collect();
    }
    x
}

struct Layer<'a> {
    c: &'a WeightContainer,
    prefix: String,
}

impl Layer<'_> {
    fn p(&self, part: &str) -> &[f64] {
        param(self.c, &format!("{}.{part}", self.prefix))
    }

    fn has(&self, part: &str) -> bool {
        self.c.contains(&format!("{}.{part}", self.prefix))
    }

    /// Modulate, 3x3 depthwise (zero pad 1), 1x1 pointwise, trainable
    /// demodulation, bias, noise, leaky relu.
    fn run(&self, x: &Planes, style: &[f64], noise: Option<&Vec<Vec<f64>>>, act: bool) -> Planes {
        let cin = x.len();
        let (h, w) = (x[0].len(), x[0][0].len());
        let sd = style.len();
        let aw = self.p("affine.weight");
        let ab = self.p("affine.bias");
        let s: Vec<f64> = (0..cin)
            .map(|i| (0..sd).map(|d| aw[i * sd + d] * style[d]).sum::<f64>() + ab[i])
            .collect();
        let wdw = self.p("dw");
        let wpw = self.p("pw");
        let cout = wpw.len() / cin;
        let mut dw = vec![vec![vec![0.0; w]; h]; cin];
        for i in 0..cin {
            for y in 0..h {
                for xx in 0..w {
                    let mut acc = 0.0;
                    for ky in 0..3 {
                        for kx in 0..3 {
                            let (sy, sx) = (y as isize + ky as isize - 1, xx as isize + kx as isize - 1);
                            if sy >= 0 && sx >= 0 && (sy as usize) < h && (sx as usize) < w {
                                acc += wdw[i * 9 + ky * 3 + kx] * s[i] * x[i][sy as usize][sx as usize];
                            }
                        }
                    }
                    dw[i][y][xx] = acc;
                }
            }
        }
        let demod: Vec<f64> = (0..cout)
            .map(|j| {
                if !self.has("p_demod") {
                    return 1.0;
                }
                let pd = self.p("p_demod");
                let mut sum = 0.0;
                for i in 0..cin {
                    for k in 0..9 {
                        let v = pd[i] * wpw[j * cin + i] * wdw[i * 9 + k];
                        sum += v * v;
                    }
                }
                1.0 / (sum + 1e-8).sqrt()
            })
            .collect();
        let bias = self.p("bias");
        let strength = if self.has("noise_strength") {
            self.p("noise_strength")[0]
        } else {
            0.0
        };
        (0..cout)
            .map(|j| {
                (0..h)
                    .map(|y| {
                        (0..w)
                            .map(|xx| {
                                let mut v = (0..cin).map(|i| wpw[j * cin + i] * dw[i][y][xx]).sum::<f64>();
                                v = v * demod[j] + bias[j];
                                if let Some(nz) = noise {
                                    v += strength * nz[y][xx];
                                }
                                if act {
                                    lrelu(v)
                                } else {
                                    v
                                }
                            })
                            .collect()
                    })
                    .collect()
            })
            .collect()
    }
}

fn idwt(x: &Planes) -> Planes {
    let groups = x.len() / 4;
    let (h, w) = (x[0].len(), x[0][0].len());
    (0..groups)
        .map(|g| {
            let mut out = vec![vec![0.0; 2 * w]; 2 * h];
            for y in 0..h {
                for xx in 0..w {
                    let (ll, hl, lh, hh) = (
                        x[4 * g][y][xx],
                        x[4 * g + 1][y][xx],
                        x[4 * g + 2][y][xx],
                        x[4 * g + 3][y][xx],
                    );
                    out[2 * y][2 * xx] = ll + hl + lh + hh;
                    out[2 * y][2 * xx + 1] = ll - hl + lh - hh;
                    out[2 * y + 1][2 * xx] = ll + hl - lh - hh;
                    out[2 * y + 1][2 * xx + 1] = ll - hl - lh + hh;
                }
            }
            out
        })
        .collect()
}

fn scripted_forward(c: &WeightContainer, z: &[f64], noises: &[Planes]) -> Planes {
    let cfg = &c.config;
    let style = mapping(c, z, cfg.mapping_layers);
    let layer = |name: &str| Layer {
        c,
        prefix: format!("synthesis.{name}"),
    };
    let konst = c.get("synthesis.const").unwrap();
    let x = to_planes(konst, 0);
    // block 0
    let x = layer("b0.conv_main").run(&x, &style, Some(&noises[0][0]), true);
    let _head0 = layer("b0.head").run(&x, &style, None, false);
    // block 1
    let up = idwt(&x);
    let x = layer("b1.conv_post_idwt").run(&up, &style, Some(&noises[1][0]), true);
    let x = layer("b1.conv_main").run(&x, &style, Some(&noises[2][0]), true);
    let head1 = layer("b1.head").run(&x, &style, None, false);
    idwt(&head1)
}

#[test]
fn engine_matches_scripted_reimplementation() {
    let cfg = GeneratorConfig {
        style_dim: 4,
        mapping_layers: 2,
        target_resolution: 16,
        channels: [(4, 8), (8, 8)].into_iter().collect(),
        ..GeneratorConfig::mobile_64()
    };
    let mut c = init_random(&cfg, 11).unwrap();
    // Non-trivial values everywhere the initializer uses constants.
    let mut rng = Rng::new(12);
    let names: Vec<String> = c.names().map(String::from).collect();
    for n in names {
        let t = c.get_mut(&n).unwrap();
        if n.ends_with("p_demod") {
            *t = rng.uniform_tensor(t.shape(), 0.5, 1.5);
        } else if n.ends_with("bias") || n.ends_with("noise_strength") {
            *t = rng.normal_tensor(t.shape(), 0.3);
        }
    }
    let g = Generator::from_container(&c).unwrap();
    assert_eq!(g.noise_sites().len(), 3);
    for seed in 0..3 {
        let (z, noises) = g.sample_inputs(seed, 2);
        let img = g.forward(&z, &noises).unwrap();
        assert_eq!(img.shape(), &[2, 3, 16, 16]);
        for n in 0..2 {
            let zn = &z.data()[n * 4..(n + 1) * 4];
            let np: Vec<Planes> = noises.iter().map(|t| to_planes(t, n)).collect();
            let want = scripted_forward(&c, zn, &np);
            let got = to_planes(&img, n);
            for ch in 0..3 {
                for y in 0..16 {
                    for x in 0..16 {
                        let (a, b) = (got[ch][y][x], want[ch][y][x]);
                        assert!(
                            (a - b).abs() <= 1e-10 * (1.0 + b.abs()),
                            "seed {seed} n {n} ({ch},{y},{x}): {a} vs {b}"
                        );
                    }
                }
            }
        }
    }
}

#[test]
fn engine_pyramid_heads_match_scripted_heads() {
    let cfg = GeneratorConfig {
        style_dim: 4,
        mapping_layers: 1,
        target_resolution: 16,
        channels: [(4, 8), (8, 4)].into_iter().collect(),
        ..GeneratorConfig::mobile_64()
    };
    let c = init_random(&cfg, 3).unwrap();
    let g = Generator::from_container(&c).unwrap();
    let (z, noises) = g.sample_inputs(1, 1);
    let style = g.mapping_forward(&z).unwrap();
    let pyr = g.synthesize_pyramid(&style, &noises).unwrap();
    let s = mapping(&c, z.data(), 1);
    let np: Vec<Planes> = noises.iter().map(|t| to_planes(t, 0)).collect();
    let x = to_planes(c.get("synthesis.const").unwrap(), 0);
    let layer = |name: &str| Layer {
        c: &c,
        prefix: format!("synthesis.{name}"),
    };
    let x = layer("b0.conv_main").run(&x, &s, Some(&np[0][0]), true);
    let head0 = idwt(&layer("b0.head").run(&x, &s, None, false));
    let got = to_planes(&pyr.levels()[0].image, 0);
    for ch in 0..3 {
        for y in 0..8 {
            for xx in 0..8 {
                assert!((got[ch][y][xx] - head0[ch][y][xx]).abs() <= 1e-10);
            }
        }
    }
}
