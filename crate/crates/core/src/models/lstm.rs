use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::tcn::check_set;
use super::{
    fit_sequence_net, fit_standardizer_once, open_checkpoint, predict_sequence_net, read_params,
    read_standardizer, sequence_tensor, to_dof, write_params, write_standardizer, InputSpec, ModelError,
    ModelKind, NetBatch, Regressor, SequenceNet, SequenceSet, TrainOptions, TrainReport,
};
use crate::kinematics::DofVector;
use crate::neural::{mse_loss, sigmoid, Dense, Differentiable, LstmLayer, NeuralError, Param, Tensor2};
use crate::signal::{FeatureSequence, Standardizer};
use crate::storage::checkpoint::{self, ByteWriter};
use crate::DOF;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LstmConfig {
    pub hidden: usize,
    pub seq_len: usize,
    pub window_ms: u32,
}

impl Default for LstmConfig {
    fn default() -> Self {
        Self { hidden: 64, seq_len: 24, window_ms: 50 }
    }
}

/// Single-layer LSTM; the final hidden state feeds a dense sigmoid head.
#[derive(Debug, Clone, PartialEq)]
pub struct LstmNet {
    pub lstm: LstmLayer,
    pub head: Dense,
}

impl LstmNet {
    pub fn new(cfg: &LstmConfig, input_dim: usize, seed: u64) -> Result<Self, ModelError> {
        if cfg.hidden == 0 || cfg.seq_len == 0 {
            return Err(ModelError::InvalidConfig(format!("{cfg:?}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let lstm = LstmLayer::new(input_dim, cfg.hidden, &mut rng);
        let head = Dense::new(cfg.hidden, DOF, &mut rng);
        Ok(Self { lstm, head })
    }

    pub fn params(&self) -> Vec<&Param> {
        vec![&self.lstm.w, &self.lstm.b, &self.head.w, &self.head.b]
    }

    pub fn parameter_count(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }
}

impl SequenceNet for LstmNet {
    fn forward(&self, x: &Tensor2, len: usize) -> Result<Tensor2, NeuralError> {
        let (h, _) = self.lstm.forward(x, len)?;
        let mut y = self.head.forward(&h)?;
        y.data.iter_mut().for_each(|v| *v = sigmoid(*v));
        Ok(y)
    }

    fn train_batch(
        &mut self,
        x: &Tensor2,
        y: &Tensor2,
        len: usize,
        _rng: Option<&mut ChaCha8Rng>,
    ) -> Result<f64, NeuralError> {
        let (h, cache) = self.lstm.forward(x, len)?;
        let mut pred = self.head.forward(&h)?;
        pred.data.iter_mut().for_each(|v| *v = sigmoid(*v));
        let (loss, mut dz) = mse_loss(&pred, y)?;
        dz.data.iter_mut().zip(&pred.data).for_each(|(d, &p)| *d *= p * (1.0 - p));
        let dh = self.head.backward(&h, &dz);
        self.lstm.backward(&cache, &dh);
        Ok(loss)
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut p = self.lstm.params_mut();
        p.extend(self.head.params_mut());
        p
    }
}

impl Differentiable for LstmNet {
    type Batch = NetBatch;

    fn loss(&self, batch: &NetBatch) -> Result<f64, NeuralError> {
        let pred = SequenceNet::forward(self, &batch.x, batch.len)?;
        Ok(mse_loss(&pred, &batch.y)?.0)
    }

    fn loss_and_grad(&mut self, batch: &NetBatch) -> Result<f64, NeuralError> {
        self.train_batch(&batch.x, &batch.y, batch.len, None)
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        SequenceNet::params_mut(self)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LstmRegressor {
    pub config: LstmConfig,
    pub net: LstmNet,
    std: Standardizer,
}

impl LstmRegressor {
    pub fn new(config: LstmConfig, feature_dim: usize, seed: u64) -> Result<Self, ModelError> {
        let net = LstmNet::new(&config, feature_dim, seed)?;
        Ok(Self { config, net, std: Standardizer::default() })
    }

    pub fn zero_output_layer(&mut self) {
        self.net.head = Dense::zeroed(self.config.hidden, DOF);
    }

    pub fn set_standardizer(&mut self, std: Standardizer) {
        self.std = std;
    }

    pub fn checkpoint_load(bytes: &[u8]) -> Result<Self, ModelError> {
        let mut blocks = open_checkpoint(bytes, ModelKind::Lstm)?;
        let c = &mut blocks.config;
        let hidden = c.get_u64()? as usize;
        let seq_len = c.get_u64()? as usize;
        let window_ms = c.get_u32()?;
        let input_dim = c.get_u64()? as usize;
        let mut model = Self::new(LstmConfig { hidden, seq_len, window_ms }, input_dim, 0)?;
        let p = &mut blocks.params;
        model.std = read_standardizer(p)?;
        read_params(p, &mut SequenceNet::params_mut(&mut model.net))?;
        if p.remaining() != 0 {
            return Err(ModelError::CorruptCheckpoint("unread parameter bytes".into()));
        }
        Ok(model)
    }
}

impl Regressor for LstmRegressor {
    fn kind(&self) -> ModelKind {
        ModelKind::Lstm
    }

    fn input_spec(&self) -> InputSpec {
        InputSpec {
            window_ms: self.config.window_ms,
            seq_len: self.config.seq_len,
            feature_dim: self.net.lstm.inputs,
        }
    }

    fn predict(&self, seq: &FeatureSequence) -> Result<DofVector, ModelError> {
        let x = sequence_tensor(&self.std, &self.input_spec(), seq)?;
        let y = SequenceNet::forward(&self.net, &x, seq.len())?;
        Ok(to_dof(y.row(0)))
    }

    fn predict_set(&self, set: &SequenceSet) -> Result<Vec<DofVector>, ModelError> {
        predict_sequence_net(&self.net, &self.std, &self.input_spec(), set)
    }

    fn train(&mut self, data: &SequenceSet, opts: &TrainOptions) -> Result<TrainReport, ModelError> {
        check_set(&self.input_spec(), data)?;
        fit_standardizer_once(&mut self.std, data)?;
        fit_sequence_net(&mut self.net, &self.std, data, opts.epochs, opts)
    }

    fn reinforce_update(
        &mut self,
        trial: &SequenceSet,
        epochs: usize,
        opts: &TrainOptions,
    ) -> Result<TrainReport, ModelError> {
        check_set(&self.input_spec(), trial)?;
        fit_sequence_net(&mut self.net, &self.std, trial, epochs, opts)
    }

    fn standardizer(&self) -> &Standardizer {
        &self.std
    }

    fn checkpoint_save(&self) -> Vec<u8> {
        let mut c = ByteWriter::new();
        c.put_u64(self.config.hidden as u64);
        c.put_u64(self.config.seq_len as u64);
        c.put_u32(self.config.window_ms);
        c.put_u64(self.net.lstm.inputs as u64);
        let mut p = ByteWriter::new();
        write_standardizer(&mut p, &self.std);
        write_params(&mut p, &self.net.params());
        checkpoint::encode(ModelKind::Lstm.tag(), &c.into_bytes(), &p.into_bytes())
    }

    fn box_clone(&self) -> Box<dyn Regressor> {
        Box::new(self.clone())
    }
}
