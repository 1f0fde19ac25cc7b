from .augment import (AugmentationPolicy, LabeledBatch, augment, batch_from_indices, eval_tensor,
                      iterate_epoch, light_policy, make_batch, ssl_policy)
from .registry import (ArrayDataset, DatasetInfo, get_dataset_info, load_split, register_dataset,
                       registered_datasets, resolve_root)
from .streams import (CLASS_INCREMENTAL, DATASET_SHIFT, TaskData, TaskSequence, TaskSpec,
                      build_class_split_sequence, build_shift_sequence, load_task, parse_sequence,
                      select_classes)
