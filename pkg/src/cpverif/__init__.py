"""Symbolic and bounded verification of cryptographic protocols.

The pieces, bottom up: a typed term algebra with matching and
substitution (`terms`), state formulas with entailment (`formulas`),
sequential and distributed process semantics (`processes`), the
adversary (`intruder`), symbolic verification on the control-point
product graph (`tg`), explicit bounded exploration (`bounded`), the
protocol source language and built-in corpus (`dsl`), and the command
line (`cli`).
"""

from .bounded import (
    BoundedVerdict, Correspondence, ExploreConfig, Exploration, Integrity,
    PropertySpec, ResourceLimit, Secrecy, Trace, Witness, explore,
    find_emitter,
)
from .dsl import (
    CORPUS_NAMES, KindError, ProtocolSyntaxError, SourceError,
    UndeclaredVariable, UnknownCorpus, elaborate, load_corpus, parse,
    parse_file, print_spec, tg_goal,
)
from .formulas import Verdict, entails, holds
from .intruder import IntruderConfig, IntruderSession, Knowledge, derivable
from .processes import (
    Assign, DistState, Edge, Protocol, Recv, Send, SeqProc, enabled, fire,
    initial_state, instantiate, successors,
)
from .terms import (
    App, Binding, Con, FreshGen, Term, Ty, TypeMismatch, Var, apply, con,
    dec, enc, kind_of, match_template, shared_channel, shared_key, subterm,
    to_text, tup, var,
)
from .tg import (
    TG, GoalSpec, SecrecyLeak, build_tg, check_goal, export_dot, reduce,
)

__version__ = "0.1.0"

__all__ = [
    "App", "Assign", "Binding", "BoundedVerdict", "CORPUS_NAMES", "Con",
    "Correspondence", "DistState", "Edge", "ExploreConfig", "Exploration",
    "FreshGen", "GoalSpec", "Integrity", "IntruderConfig", "IntruderSession",
    "KindError", "Knowledge", "Protocol", "ProtocolSyntaxError",
    "PropertySpec", "Recv", "ResourceLimit", "Secrecy", "SecrecyLeak",
    "Send", "SeqProc", "SourceError", "TG", "Term", "Trace", "Ty",
    "TypeMismatch", "UndeclaredVariable", "UnknownCorpus", "Var", "Verdict",
    "Witness", "apply", "build_tg", "check_goal", "con", "dec", "derivable",
    "elaborate", "enabled", "enc", "entails", "explore", "export_dot",
    "find_emitter", "fire", "holds", "initial_state", "instantiate",
    "kind_of", "load_corpus", "match_template", "parse", "parse_file",
    "print_spec", "reduce", "shared_channel", "shared_key", "subterm",
    "successors", "tg_goal", "to_text", "tup", "var",
]
