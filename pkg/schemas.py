from typing import Literal

from pydantic import BaseModel, ConfigDict, Field, model_validator


class InteractionEvent(BaseModel):
    model_config = ConfigDict(frozen=True)

    user_id: str = Field(min_length=1)
    timestamp: int
    item_id: str = Field(min_length=1)


class PreprocessRules(BaseModel):
    model_config = ConfigDict(extra="forbid")

    min_basket_size: int = Field(default=2, ge=1)
    max_basket_size: int = Field(default=5, ge=1)
    min_seq_len: int = Field(default=4, ge=1)
    max_seq_len: int = Field(default=10, ge=1)
    sample_seed: int | None = None

    @model_validator(mode="after")
    def check_bounds(self):
        if self.min_basket_size > self.max_basket_size:
            raise ValueError("min_basket_size must not exceed max_basket_size")
        if self.min_seq_len > self.max_seq_len:
            raise ValueError("min_seq_len must not exceed max_seq_len")
        return self


class SyntheticSpec(BaseModel):
    model_config = ConfigDict(extra="forbid")

    n_users: int = Field(default=200, ge=1)
    n_items: int = Field(default=50, ge=2)
    n_baskets_per_user: int = Field(default=10, ge=1)
    n_patterns: int = Field(default=10, ge=1)
    pattern_size: int = Field(default=5, ge=1)
    noise_rate: float = Field(default=0.1, ge=0.0, le=1.0)
    kg_attrs_per_item: int = Field(default=2, ge=0)
    patterns_per_user: int = Field(default=2, ge=1)
    max_basket_size: int = Field(default=5, ge=1)
    seed: int = 7

    @model_validator(mode="after")
    def check_capacity(self):
        if self.pattern_size > self.max_basket_size:
            raise ValueError("pattern_size must not exceed max_basket_size")
        if self.n_patterns * self.pattern_size > self.n_items:
            raise ValueError("n_patterns * pattern_size must not exceed n_items")
        if self.patterns_per_user > self.n_patterns:
            raise ValueError("patterns_per_user must not exceed n_patterns")
        return self


class ModelConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    architecture: Literal["encoder_decoder", "encoder_only"] = "encoder_decoder"
    d_model: int = Field(default=64, ge=1)
    n_enc_layers: int = Field(default=2, ge=1)
    n_dec_layers: int = Field(default=2, ge=0)
    n_heads: int = Field(default=4, ge=1)
    ffn_mult: int = Field(default=4, ge=1)
    max_tokens: int = Field(default=512, ge=8)
    vocab_size: int = Field(default=0, ge=0)
    dropout: float = Field(default=0.1, ge=0.0, lt=1.0)

    @model_validator(mode="after")
    def check_heads(self):
        if self.d_model % self.n_heads:
            raise ValueError("d_model must be divisible by n_heads")
        return self


class RelationConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    d2: int = Field(default=128, ge=1)
    d3: int = Field(default=64, ge=1)
    n_experts: int = Field(default=8, ge=1)
    gcn_layers: int = Field(default=2, ge=0)
    hyper_layers: int = Field(default=2, ge=0)
    k_topk: int = Field(default=10, ge=1)
    degree_mode: Literal["weighted", "count"] = "weighted"
    hypergraph_rebuild: Literal["epoch", "step"] = "epoch"
    diagonal_gate: bool = False


class KnowledgeConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    n_hops: int = Field(default=3, ge=1)
    beam_width: int = Field(default=16, ge=1)
    token_budget: int = Field(default=512, ge=0)
    template_id: int = Field(default=0, ge=0)
    template_file: str | None = None
    min_count: int = Field(default=1, ge=1)


class AblationFlags(BaseModel):
    model_config = ConfigDict(extra="forbid")

    no_gcn: bool = False
    no_hypergcn: bool = False
    no_fbg: bool = False
    no_ktp: bool = False


class TrainConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    epochs: int = Field(default=100, ge=1)
    batch_size: int = Field(default=64, ge=1)
    lr_backbone: float = Field(default=1e-5, gt=0.0)
    lr_overhead: float = Field(default=1e-4, gt=0.0)
    weight_decay: float = Field(default=0.01, ge=0.0)
    w_plm: float = Field(default=1.0, ge=0.0)
    w_rec: float = Field(default=1.0, ge=0.0)
    w_bi: float = Field(default=1.0, ge=0.0)
    w_ii: float = Field(default=1.0, ge=0.0)
    train_ratio: float = Field(default=0.8, gt=0.0)
    val_ratio: float = Field(default=0.1, gt=0.0)
    test_ratio: float = Field(default=0.1, gt=0.0)
    dtype: Literal["float32", "float64"] = "float32"
    val_k: int = Field(default=5, ge=1)


class RunConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    seed: int = 7
    preprocess: PreprocessRules = PreprocessRules()
    model: ModelConfig = ModelConfig()
    relation: RelationConfig = RelationConfig()
    knowledge: KnowledgeConfig = KnowledgeConfig()
    train: TrainConfig = TrainConfig()
    ablate: AblationFlags = AblationFlags()


class MetricValues(BaseModel):
    f1: float = Field(ge=0.0, le=1.0)
    hr: float = Field(ge=0.0, le=1.0)
    ndcg: float = Field(ge=0.0, le=1.0)


class MetricsReport(BaseModel):
    metrics: dict[int, MetricValues]
    n_users: int
    n_skipped: int = 0
    baseline: dict[int, MetricValues] | None = None
    config: dict = {}


class EpochLog(BaseModel):
    epoch: int
    l_plm: float
    l_rec: float
    l_bi: float
    l_ii: float
    val_hr5: float
    mup_tokens: float = 0.0
    ktp_tokens: float = 0.0


class GradCheckReport(BaseModel):
    max_rel_error: float
    tol: float
    passed: bool
