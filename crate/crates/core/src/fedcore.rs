//! Client/server state, the aggregation schedule and communication accounting.
//!
//! Aggregation happens only at iterations `k ∈ K = {0, k0, 2k0, ...}`; in
//! between, the server point `y` stays fixed and clients keep updating
//! against it.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::DenseVector;

/// Per-client iterate: local primal `x_i`, dual `π_i`, cached `g_i = w_i ∇f_i(x_i)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientState {
    pub x: DenseVector,
    pub pi: DenseVector,
    pub g: DenseVector,
    pub sigma: f64,
}

impl ClientState {
    pub fn new(x: DenseVector, pi: DenseVector, g: DenseVector, sigma: f64) -> Result<Self> {
        let n = x.len();
        pi.check_len(n)?;
        g.check_len(n)?;
        if !(sigma > 0.0 && sigma.is_finite()) {
            return Err(Error::NonPositiveSigma {
                client: 0,
                value: sigma,
            });
        }
        Ok(Self { x, pi, g, sigma })
    }

    pub fn dim(&self) -> usize {
        self.x.len()
    }
}

/// Vectors exchanged between server and clients.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CommLedger {
    pub rounds: usize,
    pub uplink_vectors: usize,
    pub downlink_vectors: usize,
}

impl CommLedger {
    /// One round: every client uploads `uplink_per_client` vectors and
    /// receives the broadcast point.
    pub fn record_round(&mut self, clients: usize, uplink_per_client: usize) {
        self.rounds += 1;
        self.uplink_vectors += clients * uplink_per_client;
        self.downlink_vectors += clients;
    }

    /// Bytes moved for vectors of dimension `n` in `f64`.
    pub fn bytes(&self, n: usize) -> usize {
        (self.uplink_vectors + self.downlink_vectors) * n * std::mem::size_of::<f64>()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ServerState {
    /// Current broadcast point `y^k`.
    pub y: DenseVector,
    /// Iteration counter `k`.
    pub k: usize,
    pub sigma_total: f64,
    pub ledger: CommLedger,
}

impl ServerState {
    pub fn new(y: DenseVector, clients: &[ClientState]) -> Self {
        Self {
            y,
            k: 0,
            sigma_total: sigma_sum(clients),
            ledger: CommLedger::default(),
        }
    }

    pub fn rounds(&self) -> usize {
        self.ledger.rounds
    }

    /// Aggregation phase of iteration `k`: when `k ∈ K`, replaces `y` by the
    /// aggregate of the uploaded client states and records a round.
    /// Returns whether a round happened.
    pub fn broadcast(&mut self, k0: usize, clients: &[ClientState]) -> Result<bool> {
        if !in_schedule(self.k, k0) {
            return Ok(false);
        }
        self.y = aggregate(clients)?;
        self.ledger.record_round(clients.len(), 2);
        Ok(true)
    }

    /// Installs an externally computed broadcast point and records the round.
    pub fn record_broadcast(&mut self, y: DenseVector, clients: usize, uplink_per_client: usize) {
        self.y = y;
        self.ledger.record_round(clients, uplink_per_client);
    }

    /// Closes iteration `k` once every client has finished its local update.
    pub fn advance(&mut self) {
        self.k += 1;
    }
}

/// Start of the current communication window, `floor(k / k0) * k0`.
pub fn tau(k: usize, k0: usize) -> usize {
    debug_assert!(k0 >= 1);
    (k / k0) * k0
}

/// Whether iteration `k` is an aggregation step.
pub fn in_schedule(k: usize, k0: usize) -> bool {
    tau(k, k0) == k
}

/// Number of aggregation steps among iterations `0..iterations`.
pub fn rounds_after(iterations: usize, k0: usize) -> usize {
    iterations.div_ceil(k0)
}

fn sigma_sum(clients: &[ClientState]) -> f64 {
    clients.iter().map(|c| c.sigma).sum()
}

/// Server aggregate `(Σ σ_i x_i + Σ π_i) / σ`, reduced in client order.
pub fn aggregate(clients: &[ClientState]) -> Result<DenseVector> {
    let first = clients.first().ok_or(Error::DimensionMismatch {
        expected: 1,
        found: 0,
    })?;
    let n = first.dim();
    let mut acc = DenseVector::zeros(n);
    let mut sigma = 0.0;
    for c in clients {
        c.x.check_len(n)?;
        c.pi.check_len(n)?;
        acc.axpy(c.sigma, &c.x);
        acc.axpy(1.0, &c.pi);
        sigma += c.sigma;
    }
    acc.scale(1.0 / sigma);
    Ok(acc)
}

/// `π_i + σ_i (x_i - y)`
pub fn dual_update(state: &ClientState, y: &DenseVector) -> Result<DenseVector> {
    y.check_len(state.dim())?;
    let mut pi = state.pi.clone();
    for ((p, x), yj) in pi.iter_mut().zip(state.x.iter()).zip(y.iter()) {
        *p += state.sigma * (x - yj);
    }
    Ok(pi)
}

/// Runs the schedule for one iteration with an empty local phase.
pub fn step_schedule(server: &mut ServerState, k0: usize, clients: &[ClientState]) -> Result<bool> {
    let aggregated = server.broadcast(k0, clients)?;
    server.advance();
    Ok(aggregated)
}

/// `Σ_i (σ_i y - σ_i x_i - π_i)`: zero at a freshly aggregated `y`.
pub fn aggregation_residual(clients: &[ClientState], y: &DenseVector) -> DenseVector {
    let mut r = DenseVector::zeros(y.len());
    for c in clients {
        for ((rj, yj), (xj, pj)) in r.iter_mut().zip(y.iter()).zip(c.x.iter().zip(c.pi.iter())) {
            *rj += c.sigma * yj - c.sigma * xj - pj;
        }
    }
    r
}

#[cfg(test)]
mod tests {
    use super::*;

    fn state(x: &[f64], pi: &[f64], sigma: f64) -> ClientState {
        ClientState::new(
            DenseVector::from_vec(x.to_vec()),
            DenseVector::from_vec(pi.to_vec()),
            DenseVector::zeros(x.len()),
            sigma,
        )
        .unwrap()
    }

    #[test]
    fn tau_examples() {
        assert_eq!(tau(0, 5), 0);
        assert_eq!(tau(7, 5), 5);
        assert_eq!(tau(10, 5), 10);
        assert!(in_schedule(10, 5) && !in_schedule(7, 5));
    }

    #[test]
    fn equal_sigma_zero_dual_is_mean() {
        let cs = vec![
            state(&[1.0, 2.0], &[0.0, 0.0], 3.0),
            state(&[3.0, -2.0], &[0.0, 0.0], 3.0),
        ];
        assert_eq!(aggregate(&cs).unwrap().as_slice(), &[2.0, 0.0]);
    }

    #[test]
    fn weighted_scalar_aggregate() {
        let cs = vec![state(&[0.0], &[0.0], 1.0), state(&[4.0], &[0.0], 3.0)];
        assert_eq!(aggregate(&cs).unwrap().as_slice(), &[3.0]);
    }

    #[test]
    fn aggregate_checks_dimensions() {
        let cs = vec![
            state(&[0.0], &[0.0], 1.0),
            state(&[4.0, 1.0], &[0.0, 0.0], 3.0),
        ];
        assert!(matches!(
            aggregate(&cs),
            Err(Error::DimensionMismatch { .. })
        ));
        assert!(aggregate(&[]).is_err());
    }

    #[test]
    fn dual_update_examples() {
        let s = state(&[1.0, 2.0], &[0.5, -0.5], 2.0);
        let y = DenseVector::from_vec(vec![1.0, 2.0]);
        assert_eq!(dual_update(&s, &y).unwrap(), s.pi);

        let s = state(&[1.0, -1.0], &[0.0, 0.0], 2.0);
        let pi = dual_update(&s, &DenseVector::zeros(2)).unwrap();
        assert_eq!(pi.as_slice(), &[2.0, -2.0]);
    }

    #[test]
    fn schedule_counts_rounds() {
        let cs = vec![state(&[1.0], &[0.0], 1.0), state(&[3.0], &[0.0], 1.0)];
        let mut server = ServerState::new(DenseVector::zeros(1), &cs);
        assert!(step_schedule(&mut server, 5, &cs).unwrap());
        assert_eq!(server.rounds(), 1);
        assert_eq!(server.y.as_slice(), &[2.0]);

        let mut off = ServerState::new(DenseVector::from_vec(vec![7.0]), &cs);
        off.k = 3;
        assert!(!step_schedule(&mut off, 5, &cs).unwrap());
        assert_eq!((off.rounds(), off.y[0], off.k), (0, 7.0, 4));

        let mut server = ServerState::new(DenseVector::zeros(1), &cs);
        for _ in 0..20 {
            step_schedule(&mut server, 5, &cs).unwrap();
        }
        assert_eq!(server.rounds(), 4);
        assert_eq!(server.ledger.uplink_vectors, 2 * 2 * 4);
        assert_eq!(server.ledger.downlink_vectors, 2 * 4);
        assert_eq!(server.ledger.bytes(1), (16 + 8) * 8);
    }

    #[test]
    fn aggregation_identity_holds_at_aggregate() {
        let cs = vec![
            state(&[1.0, -2.0], &[0.3, 0.1], 1.5),
            state(&[0.5, 4.0], &[-0.2, 0.7], 0.25),
            state(&[-3.0, 1.0], &[0.0, -1.1], 2.0),
        ];
        let y = aggregate(&cs).unwrap();
        assert!(aggregation_residual(&cs, &y).norm_inf() < 1e-12);
    }
}
