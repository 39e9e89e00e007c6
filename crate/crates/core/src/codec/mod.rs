//! Template rendering, tokenization and reply parsing.

mod template;
mod vocab;

pub use template::{
    encode_prompt, parse_reply, prompt_template, render, render_prompt, render_reply,
    reply_template, vocabulary_for, ParsedReply, RenderedExample, TEMPLATE_VERSION,
};
pub use vocab::{
    pretokenize, SpecialToken, Vocabulary, EDIT_LITERAL, IMAGE_LITERAL, N_RESERVED,
    RESERVED_LITERALS, UNKNOWN_MARKER,
};
