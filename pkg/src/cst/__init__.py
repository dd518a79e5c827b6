"""Caption decoders trained with consensus rewards, in numpy."""

__version__ = "0.1.0"

from .data import (BOS, EOS, UNK, Dataset, DatasetItem, Vocabulary, build_vocab, decode_caption,
                   encode_caption, generate_synthetic, load_dataset, save_dataset, tokenize)
from .evaluate import EvalReport, evaluate
from .metrics import CountingScorer, bleu, build_doc_freq, cider_d, corpus_score, rouge_l
from .model import (ForwardCache, ModelParams, ParamGrads, backward, beam_search, forward_teacher,
                    greedy_decode, init_params, load_checkpoint, sample_sequence, save_checkpoint)
from .objective import (RewardTable, greedy_baseline, rl_logit_grad, rl_sentence_loss, scb_baseline,
                        wxe_video_loss, xe_logit_grad, xe_sentence_loss)
from .trainer import (OptimizerState, TrainConfig, TrainLog, TrainingDiverged, adam_step, cst_pipeline,
                      precompute_rewards, train)
