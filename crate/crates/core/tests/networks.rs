use daae::graph::Graph;
use daae::networks::{autoencode_on, init_network, reconstruct, ArchSpec, NetworkKind};
use daae::optim::{AdamSettings, AdamState, ADAM_EPS};
use daae::Tensor;

#[test]
fn generator_overfits_a_single_image() {
    let arch = ArchSpec {
        base_filters: 8,
        latent_dim: 16,
        ..ArchSpec::default()
    };
    let mut params = init_network(&arch, NetworkKind::Generator, 4).unwrap();
    let mut opt = AdamState::for_params(&params);
    let adam = AdamSettings {
        lr: 2e-3,
        beta1: 0.5,
        beta2: 0.999,
        eps: ADAM_EPS,
    };
    let x: Vec<f64> = (0..256)
        .map(|i| {
            let (r, c) = ((i / 16) as f64 - 7.5, (i % 16) as f64 - 7.5);
            (-(r * r + c * c) / 18.0).exp() * 1.8 - 0.9
        })
        .collect();
    let x = Tensor::new(vec![1, 1, 16, 16], x).unwrap();

    for _ in 0..500 {
        let mut g = Graph::new();
        let xv = g.constant(&x);
        let bound = params.bind(&mut g, true);
        let (_, y) = autoencode_on(&mut g, &arch, &bound, xv).unwrap();
        let loss = daae::losses::irec_loss(&mut g, xv, y).unwrap();
        g.backward(loss).unwrap();
        params.zero_grad();
        params.accumulate_from(&g, &bound).unwrap();
        opt.step(&mut params, &adam).unwrap();
    }
    let y = reconstruct(&params, &x).unwrap();
    let err = y
        .values()
        .iter()
        .zip(x.values())
        .map(|(a, b)| (a - b).abs())
        .sum::<f64>()
        / 256.0;
    assert!(err < 0.05, "mean |x - G(x)| = {err}");
}
