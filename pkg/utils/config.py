'''
Run configuration: one JSON document gathering every knob of a run.

Sections (each maps onto a dataclass with its defaults):
    trainer     TrainConfig
    objective   ObjectiveWeights
    reward.cp   CounterfactualRewardConfig
    reward.gr   CorrectiveRewardConfig
    engine      EngineConfig (with nested 'gains' and 'decay')
    world       WorldConfig
    vocab       VocabConfig
    pretrain    PretrainConfig
    eval        EvalConfig
plus top level 'scenarios' (list of names or paths) and 'seed'.

Unknown keys are rejected, missing keys fall back to their default with a
printed notice.
'''
import json
import os
from dataclasses import dataclass, field, fields, is_dataclass, asdict, MISSING

import sys; sys.path.append('..'); sys.path.append('.')
from sim.microworld import WorldConfig
from sim.scenarios import BUILT_IN
from counterfactual.engine import EngineConfig
from counterfactual.rewards import CounterfactualRewardConfig, CorrectiveRewardConfig
from policy.vocabulary import VocabConfig
from policy.pretrain import PretrainConfig
from trainers.objectives import ObjectiveWeights

METHODS = ('craft', 'grpo', 'ppo', 'reinforcepp', 'distill')


@dataclass(frozen=True)
class TrainConfig:
    epochs_per_round: int = 4
    lr_initial: float = 1e-4
    lr_min: float = 5e-6
    weight_decay: float = 1e-5
    grad_clip_norm: float = 0.5
    total_rounds: int = 30
    method: str = 'craft'
    decision_interval: int = 5
    buffer_size: int = 2048
    ema_momentum: float = 0.99
    workers: int = 1

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError('unknown method ' + repr(self.method) + ', choose from ' + str(METHODS))
        if self.epochs_per_round < 1:
            raise ValueError('epochs_per_round must be >= 1')
        if not 0 < self.lr_min <= self.lr_initial:
            raise ValueError('need 0 < lr_min <= lr_initial')
        if self.total_rounds < 0:
            raise ValueError('total_rounds must be >= 0')
        if self.buffer_size < 1 or self.decision_interval < 1:
            raise ValueError('buffer_size and decision_interval must be >= 1')
        if not 0 <= self.ema_momentum < 1:
            raise ValueError('ema_momentum must lie in [0, 1)')
        if self.workers < 1:
            raise ValueError('workers must be >= 1')


@dataclass(frozen=True)
class EvalConfig:
    episodes: int = 10
    seed: int = 1000
    scenarios: tuple = ()

    def __post_init__(self):
        if self.episodes < 0:
            raise ValueError('episodes must be >= 0')
        object.__setattr__(self, 'scenarios', tuple(self.scenarios))


@dataclass(frozen=True)
class RunConfig:
    trainer: TrainConfig = field(default_factory=TrainConfig)
    objective: ObjectiveWeights = field(default_factory=ObjectiveWeights)
    reward_cp: CounterfactualRewardConfig = field(default_factory=CounterfactualRewardConfig)
    reward_gr: CorrectiveRewardConfig = field(default_factory=CorrectiveRewardConfig)
    engine: EngineConfig = field(default_factory=EngineConfig)
    world: WorldConfig = field(default_factory=WorldConfig)
    vocab: VocabConfig = field(default_factory=VocabConfig)
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    scenarios: tuple = BUILT_IN
    seed: int = 0

    @property
    def eval_scenarios(self):
        return self.eval.scenarios if len(self.eval.scenarios) > 0 else self.scenarios


# JSON path -> RunConfig attribute
SECTIONS = {'trainer': 'trainer',
            'objective': 'objective',
            'reward.cp': 'reward_cp',
            'reward.gr': 'reward_gr',
            'engine': 'engine',
            'world': 'world',
            'vocab': 'vocab',
            'pretrain': 'pretrain',
            'eval': 'eval'}
TOP_LEVEL = ('scenarios', 'seed')


def _nested_default(f):
    if f.default_factory is not MISSING:
        value = f.default_factory()
        if is_dataclass(value):
            return value
    return None


def _build(cls, values, prefix, quiet=False):
    '''dataclass instance from a dict, recursing into nested dataclass fields'''
    if not isinstance(values, dict):
        raise ValueError('config section ' + repr(prefix) + ' must be an object')
    names = [f.name for f in fields(cls)]
    for key in values:
        if key not in names:
            raise ValueError('unknown config key ' + repr(prefix + '.' + key))
    kwargs = {}
    for f in fields(cls):
        key = prefix + '.' + f.name
        nested = _nested_default(f)
        if f.name not in values:
            if not quiet:
                default = asdict(nested) if nested is not None else (
                    f.default if f.default is not MISSING else f.default_factory())
                print('config: ' + repr(key) + ' missing, using default ' + str(default))
            continue
        value = values[f.name]
        if nested is not None:
            kwargs[f.name] = _build(type(nested), value, key, quiet)
        elif isinstance(value, list):
            kwargs[f.name] = tuple(value)
        else:
            kwargs[f.name] = value
    return cls(**kwargs)


def _sections_from_document(doc):
    '''flatten {'reward': {'cp': ...}} into {'reward.cp': ...}'''
    out = {}
    for key, value in doc.items():
        if key in TOP_LEVEL or key in SECTIONS:
            out[key] = value
        elif key == 'reward' and isinstance(value, dict):
            for sub, sub_value in value.items():
                if 'reward.' + sub not in SECTIONS:
                    raise ValueError('unknown config key ' + repr('reward.' + sub))
                out['reward.' + sub] = sub_value
        else:
            raise ValueError('unknown config key ' + repr(key))
    return out


def apply_overrides(sections, overrides):
    '''
    overrides map dotted keys to values, e.g. {'trainer.method': 'ppo', 'seed': 3}.
    The section part may itself be dotted ('reward.cp.w_prog').
    '''
    for dotted, value in overrides.items():
        if value is None:
            continue
        if dotted in TOP_LEVEL:
            sections[dotted] = value
            continue
        matches = [s for s in SECTIONS if dotted.startswith(s + '.')]
        if not matches:
            raise ValueError('unknown config key ' + repr(dotted))
        section = max(matches, key=len)
        path = dotted[len(section) + 1:].split('.')
        target = sections.setdefault(section, {})
        for part in path[:-1]:
            target = target.setdefault(part, {})
        target[path[-1]] = value
    return sections


def run_config_from_dict(doc, overrides=None, quiet=False):
    sections = _sections_from_document(dict(doc))
    sections = apply_overrides(sections, overrides or {})
    kwargs = {}
    defaults = RunConfig()
    for section, attr in SECTIONS.items():
        cls = type(getattr(defaults, attr))
        if section not in sections:
            if not quiet:
                print('config: section ' + repr(section) + ' missing, using defaults')
            continue
        kwargs[attr] = _build(cls, sections[section], section, quiet)
    if 'scenarios' in sections:
        kwargs['scenarios'] = tuple(sections['scenarios'])
    elif not quiet:
        print('config: ' + repr('scenarios') + ' missing, using default ' + str(list(BUILT_IN)))
    if 'seed' in sections:
        kwargs['seed'] = int(sections['seed'])
    elif not quiet:
        print('config: ' + repr('seed') + ' missing, using default 0')
    return RunConfig(**kwargs)


def load_run_config(path=None, overrides=None, quiet=False):
    '''RunConfig from a JSON file (or pure defaults when path is None) plus overrides'''
    doc = {}
    if path is not None:
        if not os.path.isfile(path):
            raise ValueError('config file not found: ' + str(path))
        with open(path, 'r') as f:
            try:
                doc = json.load(f)
            except json.JSONDecodeError as e:
                raise ValueError('config file ' + str(path) + ' is not valid JSON: ' + str(e))
    return run_config_from_dict(doc, overrides, quiet=quiet if path is not None else True)


def _jsonable(value):
    if isinstance(value, tuple):
        return [_jsonable(v) for v in value]
    if isinstance(value, dict):
        return {k: _jsonable(v) for k, v in value.items()}
    return value


def run_config_to_dict(run_config):
    doc = {'reward': {}}
    for section, attr in SECTIONS.items():
        values = _jsonable(asdict(getattr(run_config, attr)))
        if section.startswith('reward.'):
            doc['reward'][section[len('reward.'):]] = values
        else:
            doc[section] = values
    doc['scenarios'] = list(run_config.scenarios)
    doc['seed'] = run_config.seed
    return doc


def save_run_config(run_config, path):
    with open(path, 'w') as f:
        json.dump(run_config_to_dict(run_config), f, indent=2, sort_keys=True)
