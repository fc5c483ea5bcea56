//! Inference protocols over one frozen backbone: weight-channel inference, a
//! single-agent baseline and a text-relay multi-agent baseline, with token accounting.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::backbone::{Backbone, CounterSnapshot, DecodeParams, ExecContext, HiddenStack};
use crate::error::{Result, TflowError};
use crate::fusion::{apply_scoped, TransientPatch};
use crate::tokenizer::{detokenize, tokenize, with_bos, TokenSeq, EOS};
use crate::training::{DatasetRecord, Mode, SenderBatch, TflowModel};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RoleKind {
    Sender,
    Receiver,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RolePrompt {
    pub agent_id: String,
    pub text: String,
    pub kind: RoleKind,
}

impl RolePrompt {
    pub fn sender(id: &str, text: &str) -> Self {
        Self { agent_id: id.into(), text: text.into(), kind: RoleKind::Sender }
    }

    pub fn receiver(id: &str, text: &str) -> Self {
        Self { agent_id: id.into(), text: text.into(), kind: RoleKind::Receiver }
    }
}

/// Senders in declaration order plus the single receiver.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RoleSet {
    pub senders: Vec<RolePrompt>,
    pub receiver: RolePrompt,
}

impl RoleSet {
    pub fn new(roles: &[RolePrompt]) -> Result<Self> {
        let receivers: Vec<&RolePrompt> = roles.iter().filter(|r| r.kind == RoleKind::Receiver).collect();
        match receivers.len() {
            0 => Err(TflowError::Config("role set has no receiver".into())),
            1 => {
                let mut ids: Vec<&str> = roles.iter().map(|r| r.agent_id.as_str()).collect();
                ids.sort();
                ids.dedup();
                if ids.len() != roles.len() {
                    return Err(TflowError::Config("agent ids must be unique".into()));
                }
                Ok(Self {
                    senders: roles.iter().filter(|r| r.kind == RoleKind::Sender).cloned().collect(),
                    receiver: receivers[0].clone(),
                })
            }
            n => Err(TflowError::Config(format!("role set has {n} receivers, expected exactly one"))),
        }
    }

    /// Strategy and knowledge senders plus a solving receiver.
    pub fn default_roles() -> Vec<RolePrompt> {
        vec![
            RolePrompt::sender("A", "[plan] "),
            RolePrompt::sender("B", "[knowledge] "),
            RolePrompt::receiver("C", "[solve] "),
        ]
    }

    pub fn require_senders(&self) -> Result<()> {
        if self.senders.is_empty() {
            return Err(TflowError::Config("weight-channel inference needs at least one sender".into()));
        }
        Ok(())
    }

    pub fn n_agents(&self) -> usize {
        self.senders.len() + 1
    }
}

/// Sender input: role prompt, then the context (isolation mode only), then the query.
pub fn sender_text(role: &RolePrompt, query: &str, context: &str, mode: Mode) -> String {
    match mode {
        Mode::Isolation if !context.is_empty() => format!("{}{} {}", role.text, context, query),
        _ => format!("{}{}", role.text, query),
    }
}

pub fn sender_tokens(role: &RolePrompt, rec: &DatasetRecord, mode: Mode) -> TokenSeq {
    with_bos(&[&sender_text(role, &rec.query, &rec.context, mode)])
}

/// Receiver input: role prompt and query only.
pub fn receiver_prompt(role: &RolePrompt, query: &str) -> TokenSeq {
    with_bos(&[&role.text, query])
}

/// Receiver prompt followed by the target and EOS, with the target positions masked in.
pub fn receiver_teacher_forced(role: &RolePrompt, rec: &DatasetRecord) -> Result<(TokenSeq, Vec<bool>)> {
    if rec.target.is_empty() {
        return Err(TflowError::Dataset(format!("record `{}` has an empty target", rec.query)));
    }
    let mut tokens = receiver_prompt(role, &rec.query);
    let prompt_len = tokens.len();
    tokens.extend(tokenize(&rec.target));
    tokens.push(EOS);
    let mask = (0..tokens.len()).map(|i| i >= prompt_len).collect();
    Ok((tokens, mask))
}

/// Exact string match after trimming surrounding whitespace.
pub fn exact_match(answer: &str, target: &str) -> bool {
    answer.trim() == target.trim()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AgentTokens {
    pub agent_id: String,
    pub kind: RoleKind,
    pub prefill_tokens: u64,
    pub generated_tokens: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenAccount {
    pub agents: Vec<AgentTokens>,
}

impl TokenAccount {
    fn push(&mut self, role: &RolePrompt, prefill: usize, generated: usize) {
        self.agents.push(AgentTokens {
            agent_id: role.agent_id.clone(),
            kind: role.kind,
            prefill_tokens: prefill as u64,
            generated_tokens: generated as u64,
        });
    }

    pub fn prefill(&self) -> u64 {
        self.agents.iter().map(|a| a.prefill_tokens).sum()
    }

    pub fn generated(&self) -> u64 {
        self.agents.iter().map(|a| a.generated_tokens).sum()
    }

    pub fn total(&self) -> u64 {
        self.prefill() + self.generated()
    }

    pub fn sender_generated(&self) -> u64 {
        self.agents.iter().filter(|a| a.kind == RoleKind::Sender).map(|a| a.generated_tokens).sum()
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct StageMillis {
    pub sender: f64,
    pub generate: f64,
    pub fuse: f64,
    pub decode: f64,
    pub total: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InferenceResult {
    pub answer: String,
    /// Receiver prompt followed by its decoded tokens.
    pub receiver_tokens: TokenSeq,
    pub account: TokenAccount,
    /// Positions and MACs actually pushed through forward passes, all agents.
    pub counters: CounterSnapshot,
    pub gate: Vec<f64>,
    pub millis: StageMillis,
}

fn ms(t: Instant) -> f64 {
    t.elapsed().as_secs_f64() * 1e3
}

fn add(a: CounterSnapshot, b: CounterSnapshot) -> CounterSnapshot {
    CounterSnapshot {
        base_macs: a.base_macs + b.base_macs,
        attn_macs: a.attn_macs + b.attn_macs,
        lora_macs: a.lora_macs + b.lora_macs,
        prefill_positions: a.prefill_positions + b.prefill_positions,
        decode_positions: a.decode_positions + b.decode_positions,
    }
}

/// Sender forward passes: hidden stacks only, no decoding.
pub fn capture_senders_counted(
    backbone: &Backbone,
    roles: &RoleSet,
    query: &str,
    context: &str,
    mode: Mode,
) -> Result<(Vec<HiddenStack>, TokenAccount, CounterSnapshot)> {
    let ctx = ExecContext::new(backbone)?;
    let mut account = TokenAccount::default();
    let mut stacks = Vec::with_capacity(roles.senders.len());
    for role in &roles.senders {
        let toks = with_bos(&[&sender_text(role, query, context, mode)]);
        let (_, hidden) = ctx.forward_capture(&toks)?;
        account.push(role, toks.len(), 0);
        stacks.push(hidden);
    }
    Ok((stacks, account, ctx.counters()))
}

/// The fused patch for one query, detached from any autograd graph.
pub fn build_patch(
    model: &TflowModel,
    backbone: &Backbone,
    roles: &RoleSet,
    query: &str,
    context: &str,
    mode: Mode,
) -> Result<(TransientPatch, TokenAccount, CounterSnapshot)> {
    roles.require_senders()?;
    let (stacks, account, counters) = capture_senders_counted(backbone, roles, query, context, mode)?;
    let out = model.sender_outputs(&SenderBatch::from_stacks(&stacks)?)?;
    let patch = model.patch(&out, 0, roles.senders.len())?.detached();
    Ok((patch, account, counters))
}

/// Receiver decoding of `(p_N, query)` under `patch` (or unpatched when `None`).
pub fn receiver_decode(
    backbone: &Backbone,
    roles: &RoleSet,
    query: &str,
    patch: Option<&mut TransientPatch>,
    decode: &DecodeParams,
) -> Result<(TokenSeq, TokenSeq, CounterSnapshot)> {
    let prompt = receiver_prompt(&roles.receiver, query);
    let ctx = ExecContext::new(backbone)?;
    let out = match patch {
        Some(p) => apply_scoped(&ctx, p, |c| c.generate(&prompt, decode))?,
        None => ctx.generate(&prompt, decode)?,
    };
    Ok((prompt, out, ctx.counters()))
}

fn finish(prompt: TokenSeq, out: TokenSeq) -> (String, TokenSeq) {
    let answer = detokenize(&out);
    let mut seq = prompt;
    seq.extend(out);
    (answer, seq)
}

/// Weight-channel inference for one query.
#[allow(clippy::too_many_arguments)]
pub fn tflow_infer(
    query: &str,
    context: &str,
    roles: &RoleSet,
    model: &TflowModel,
    backbone: &Backbone,
    decode: &DecodeParams,
    mode: Mode,
) -> Result<InferenceResult> {
    let t0 = Instant::now();
    roles.require_senders()?;
    let (stacks, mut account, sender_counters) = capture_senders_counted(backbone, roles, query, context, mode)?;
    let sender_ms = ms(t0);
    let t1 = Instant::now();
    let out = model.sender_outputs(&SenderBatch::from_stacks(&stacks)?)?;
    let generate_ms = ms(t1);
    let t2 = Instant::now();
    let mut patch = model.patch(&out, 0, roles.senders.len())?.detached();
    let gate = crate::nn::to_f64_vec(&patch.gamma)?;
    let fuse_ms = ms(t2);
    let t3 = Instant::now();
    let (prompt, gen, recv_counters) = receiver_decode(backbone, roles, query, Some(&mut patch), decode)?;
    let decode_ms = ms(t3);
    account.push(&roles.receiver, prompt.len(), gen.len());
    let (answer, receiver_tokens) = finish(prompt, gen);
    Ok(InferenceResult {
        answer,
        receiver_tokens,
        account,
        counters: add(sender_counters, recv_counters),
        gate,
        millis: StageMillis { sender: sender_ms, generate: generate_ms, fuse: fuse_ms, decode: decode_ms, total: ms(t0) },
    })
}

/// Receiver alone on `(p_N, query)`.
pub fn single_infer(query: &str, receiver: &RolePrompt, backbone: &Backbone, decode: &DecodeParams) -> Result<InferenceResult> {
    let t0 = Instant::now();
    let roles = RoleSet { senders: vec![], receiver: receiver.clone() };
    let (prompt, gen, counters) = receiver_decode(backbone, &roles, query, None, decode)?;
    let mut account = TokenAccount::default();
    account.push(receiver, prompt.len(), gen.len());
    let (answer, receiver_tokens) = finish(prompt, gen);
    let total = ms(t0);
    Ok(InferenceResult {
        answer,
        receiver_tokens,
        account,
        counters,
        gate: vec![],
        millis: StageMillis { decode: total, total, ..Default::default() },
    })
}

/// Text relay: each sender decodes a message, the receiver reads all messages before
/// the query.
pub fn textmas_infer(
    query: &str,
    context: &str,
    roles: &RoleSet,
    backbone: &Backbone,
    decode: &DecodeParams,
    sender_decode: &DecodeParams,
    mode: Mode,
) -> Result<InferenceResult> {
    let t0 = Instant::now();
    let ctx = ExecContext::new(backbone)?;
    let mut account = TokenAccount::default();
    let mut messages = Vec::with_capacity(roles.senders.len());
    for role in &roles.senders {
        let toks = with_bos(&[&sender_text(role, query, context, mode)]);
        let msg = ctx.generate(&toks, sender_decode)?;
        account.push(role, toks.len(), msg.len());
        messages.push(detokenize(&msg));
    }
    let sender_counters = ctx.counters();
    let sender_ms = ms(t0);
    let t1 = Instant::now();
    let mut parts: Vec<&str> = vec![&roles.receiver.text];
    parts.extend(messages.iter().map(String::as_str));
    parts.push(query);
    let prompt = with_bos(&parts);
    let max_seq = backbone.config().max_seq;
    if prompt.len() >= max_seq {
        return Err(TflowError::SequenceLength { len: prompt.len(), max: max_seq - 1 });
    }
    let rctx = ExecContext::new(backbone)?;
    let gen = rctx.generate(&prompt, decode)?;
    account.push(&roles.receiver, prompt.len(), gen.len());
    let decode_ms = ms(t1);
    let counters = add(sender_counters, rctx.counters());
    let (answer, receiver_tokens) = finish(prompt, gen);
    Ok(InferenceResult {
        answer,
        receiver_tokens,
        account,
        counters,
        gate: vec![],
        millis: StageMillis { sender: sender_ms, decode: decode_ms, total: ms(t0), ..Default::default() },
    })
}
