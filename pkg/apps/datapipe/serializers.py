from rest_framework import serializers

from apps.core.serializers import StrictSerializer

SIDES = ('front', 'back')
SOURCE_TYPES = ('photo', 'vl', 'msii', 'mixed')
SPLITS = ('train', 'val', 'test')


class BoxSerializer(StrictSerializer):
    x_min = serializers.FloatField()
    y_min = serializers.FloatField()
    x_max = serializers.FloatField()
    y_max = serializers.FloatField()

    def validate(self, data):
        if not data['x_min'] < data['x_max'] or not data['y_min'] < data['y_max']:
            raise serializers.ValidationError(
                f"Caja vacía ({data['x_min']}, {data['y_min']}, {data['x_max']}, {data['y_max']})"
            )
        return data


class AnnotationSetSerializer(StrictSerializer):
    segment_id = serializers.CharField(allow_blank=False, trim_whitespace=True)
    side = serializers.ChoiceField(choices=SIDES)
    image = serializers.CharField(allow_blank=False)
    width = serializers.IntegerField(min_value=1)
    height = serializers.IntegerField(min_value=1)
    source_type = serializers.ChoiceField(choices=SOURCE_TYPES)
    boxes = serializers.ListField(child=BoxSerializer(), allow_empty=True)


class SplitManifestSerializer(StrictSerializer):
    seed = serializers.IntegerField()
    assignments = serializers.DictField(child=serializers.ChoiceField(choices=SPLITS))

    def validate_assignments(self, value):
        if not value:
            raise serializers.ValidationError("La partición no asigna ningún segmento")
        return value


class CocoImageSerializer(serializers.Serializer):
    id = serializers.IntegerField()
    file_name = serializers.CharField()
    width = serializers.IntegerField(min_value=1)
    height = serializers.IntegerField(min_value=1)


class CocoAnnotationSerializer(serializers.Serializer):
    image_id = serializers.IntegerField()
    bbox = serializers.ListField(child=serializers.FloatField(), min_length=4, max_length=4)

    def validate_bbox(self, value):
        if value[2] <= 0 or value[3] <= 0:
            raise serializers.ValidationError(f"bbox con ancho/alto no positivo: {value}")
        return value


class CocoDocumentSerializer(serializers.Serializer):
    """Subconjunto de COCO que usa el importador; el resto de claves se ignora."""
    images = serializers.ListField(child=CocoImageSerializer())
    annotations = serializers.ListField(child=CocoAnnotationSerializer())
