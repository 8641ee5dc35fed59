//! Line-oriented chat over ranked generation. Each user line becomes a turn;
//! the top-ranked response is appended to the context as the next turn.

use std::io::{BufRead, Write};

use crate::autodiff::ParamStore;
use crate::data::{AttributeVocab, Turn, Vocab};
use crate::error::Result;
use crate::inference::{generate_ranked, InferenceConfig};
use crate::model::PhredModel;

const HELP: &str = "commands: /persona NAME (responder), /me NAME (your attribute), /topk K, /reset, /help, /quit";

pub struct ChatSession<'a> {
    model: &'a PhredModel,
    store: &'a ParamStore,
    vocab: &'a Vocab,
    attributes: &'a AttributeVocab,
    config: InferenceConfig,
    turns: Vec<Turn>,
    user: u32,
    responder: u32,
    top_k: usize,
}

impl<'a> ChatSession<'a> {
    /// The user speaks as the first attribute and the model answers as the
    /// second (or the first, if there is only one).
    pub fn new(
        model: &'a PhredModel,
        store: &'a ParamStore,
        vocab: &'a Vocab,
        attributes: &'a AttributeVocab,
        config: InferenceConfig,
    ) -> Result<Self> {
        config.validate()?;
        let responder = if attributes.len() > 1 { 1 } else { 0 };
        Ok(ChatSession {
            model,
            store,
            vocab,
            attributes,
            config,
            turns: Vec::new(),
            user: 0,
            responder,
            top_k: 1,
        })
    }

    pub fn turns(&self) -> &[Turn] {
        &self.turns
    }

    pub fn responder(&self) -> u32 {
        self.responder
    }

    pub fn top_k(&self) -> usize {
        self.top_k
    }

    /// Reads lines until EOF or `/quit`.
    pub fn run(&mut self, input: impl BufRead, mut out: impl Write) -> Result<()> {
        writeln!(out, "{HELP}")?;
        self.prompt(&mut out)?;
        for line in input.lines() {
            if !self.handle(line?.trim(), &mut out)? {
                break;
            }
            self.prompt(&mut out)?;
        }
        Ok(())
    }

    fn prompt(&self, out: &mut impl Write) -> Result<()> {
        write!(out, "{}> ", self.name(self.user))?;
        out.flush()?;
        Ok(())
    }

    fn name(&self, id: u32) -> &str {
        self.attributes.name(id).unwrap_or("?")
    }

    /// Handles one line; returns false when the session should end.
    pub fn handle(&mut self, line: &str, out: &mut impl Write) -> Result<bool> {
        if line.is_empty() {
            return Ok(true);
        }
        let Some(command) = line.strip_prefix('/') else {
            self.reply(line, out)?;
            return Ok(true);
        };
        let (cmd, arg) = command.split_once(char::is_whitespace).unwrap_or((command, ""));
        let arg = arg.trim();
        match cmd {
            "quit" | "exit" => return Ok(false),
            "reset" => {
                self.turns.clear();
                writeln!(out, "context cleared")?;
            }
            "persona" | "me" => match self.attributes.id(arg) {
                Ok(id) => {
                    if cmd == "persona" {
                        self.responder = id;
                        writeln!(out, "responder is now {arg}")?;
                    } else {
                        self.user = id;
                        writeln!(out, "you are now {arg}")?;
                    }
                }
                Err(e) => writeln!(out, "{e}")?,
            },
            "topk" => match arg.parse::<usize>() {
                Ok(k) if k >= 1 => {
                    self.top_k = k;
                    if k > self.config.samples {
                        writeln!(out, "showing {k} of {} samples", self.config.samples)?;
                    }
                }
                _ => writeln!(out, "usage: /topk K with K ≥ 1")?,
            },
            "help" => writeln!(out, "{HELP}")?,
            other => writeln!(out, "unknown command /{other}; {HELP}")?,
        }
        Ok(true)
    }

    fn text(&self, tokens: &[u32]) -> String {
        let s = self.vocab.decode(tokens);
        if s.is_empty() {
            "(empty response)".into()
        } else {
            s
        }
    }

    fn reply(&mut self, text: &str, out: &mut impl Write) -> Result<()> {
        self.turns.push(Turn {
            tokens: self.vocab.encode(text),
            attribute: self.user,
        });
        let stream = self.turns.len() as u64;
        let ranked = generate_ranked(self.model, self.store, &self.turns, self.responder, &self.config, stream)?;
        let best = &ranked[0];
        writeln!(out, "{}: {}", self.name(self.responder), self.text(&best.tokens))?;
        if self.top_k > 1 {
            for (rank, c) in ranked.iter().take(self.top_k).enumerate() {
                let probs: Vec<String> = c.word_probs.iter().map(|p| format!("{p:.4}")).collect();
                writeln!(
                    out,
                    "  {}. {:.4}  {}  [{}]",
                    rank + 1,
                    c.rank_score,
                    self.text(&c.tokens),
                    probs.join(" ")
                )?;
            }
        }
        self.turns.push(Turn {
            tokens: best.tokens.clone(),
            attribute: self.responder,
        });
        Ok(())
    }
}
