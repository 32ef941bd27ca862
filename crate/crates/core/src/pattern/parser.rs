use crate::ontology::Ontology;

use super::{PatternAst, PatternError, Scope};

/// Parses pattern text, resolving every term against the ontology.
pub fn parse_pattern(text: &str, ontology: &Ontology) -> Result<PatternAst, PatternError> {
    let mut p = Parser { text, pos: 0, ontology };
    let ast = p.pattern()?;
    p.skip_ws();
    if p.pos != text.len() {
        return Err(p.expected("end of pattern"));
    }
    Ok(ast)
}

struct Parser<'a> {
    text: &'a str,
    pos: usize,
    ontology: &'a Ontology,
}

impl<'a> Parser<'a> {
    fn expected(&self, what: &str) -> PatternError {
        PatternError::Syntax { position: self.pos, expected: what.to_owned() }
    }

    fn skip_ws(&mut self) {
        let rest = &self.text[self.pos..];
        self.pos += rest.len() - rest.trim_start().len();
    }

    fn eat(&mut self, token: &str) -> bool {
        self.skip_ws();
        if self.text[self.pos..].starts_with(token) {
            self.pos += token.len();
            true
        } else {
            false
        }
    }

    fn expect(&mut self, token: &str) -> Result<(), PatternError> {
        if self.eat(token) {
            Ok(())
        } else {
            Err(self.expected(&format!("`{token}`")))
        }
    }

    fn peek_word(&mut self) -> &'a str {
        self.skip_ws();
        let rest = &self.text[self.pos..];
        let len = rest
            .find(|c: char| !(c.is_ascii_alphanumeric() || c == '_'))
            .unwrap_or(rest.len());
        &rest[..len]
    }

    fn keyword(&mut self, kw: &str) -> Result<(), PatternError> {
        if self.peek_word() == kw {
            self.pos += kw.len();
            Ok(())
        } else {
            Err(self.expected(&format!("`{kw}`")))
        }
    }

    fn pattern(&mut self) -> Result<PatternAst, PatternError> {
        let word = self.peek_word();
        if word == "SEQ" {
            self.pos += word.len();
            self.seq()
        } else if word.is_empty() {
            Err(self.expected("concept id or `SEQ(`"))
        } else {
            self.term()
        }
    }

    fn seq(&mut self) -> Result<PatternAst, PatternError> {
        self.expect("(")?;
        let mut children = vec![self.pattern()?];
        while self.eat(",") {
            children.push(self.pattern()?);
        }
        if children.len() < 2 {
            return Err(self.expected("`,` (a sequence needs at least two patterns)"));
        }
        self.expect(")")?;
        self.keyword("WITHIN")?;
        self.skip_ws();
        let digits_at = self.pos;
        let digits = self.text[self.pos..]
            .find(|c: char| !c.is_ascii_digit())
            .map_or(&self.text[self.pos..], |n| &self.text[self.pos..self.pos + n]);
        if digits.is_empty() {
            return Err(self.expected("integer number of seconds"));
        }
        self.pos += digits.len();
        let secs: i64 = digits
            .parse()
            .ok()
            .filter(|&s: &i64| s > 0 && s <= i64::MAX / 1000)
            .ok_or(PatternError::Syntax {
                position: digits_at,
                expected: "positive number of seconds".into(),
            })?;
        self.expect("s")?;
        let scope = if self.peek_word() == "SAME" {
            self.keyword("SAME")?;
            self.keyword("CAMERA")?;
            Scope::SameCamera
        } else {
            Scope::AnyCamera
        };
        Ok(PatternAst::Seq { children, within: secs * 1000, scope })
    }

    fn term(&mut self) -> Result<PatternAst, PatternError> {
        let word = self.peek_word();
        let concept = self.ontology.validate_term(word)?;
        self.pos += word.len();
        let mut min_confidence = 0.0;
        if self.eat(">=") {
            self.skip_ws();
            let at = self.pos;
            let rest = &self.text[self.pos..];
            let len = rest.find(|c: char| !(c.is_ascii_digit() || c == '.')).unwrap_or(rest.len());
            min_confidence = rest[..len]
                .parse::<f64>()
                .ok()
                .filter(|v| (0.0..=1.0).contains(v))
                .ok_or(PatternError::Syntax {
                    position: at,
                    expected: "confidence in [0,1]".into(),
                })?;
            self.pos += len;
        }
        Ok(PatternAst::Term { concept, min_confidence })
    }
}
